//! Dataset files.
//!
//! CSV: an optional `# {json metadata}` line, then a header
//! `s0..,a0..,r,sn0..,done` and one row per transition. Floats are written
//! in shortest round-trip form, so CSV round trips are exact as well.
//!
//! Binary (little endian): `FPDS`, `u32` version, `u32` metadata length,
//! metadata JSON, `u64` rows, `u64` state dim, `u64` action dim, then the
//! `f64` arrays `s, a, r, s', done` in row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DatasetMeta, OfflineDataset};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"FPDS";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    Csv,
    Binary,
}

impl DatasetFormat {
    /// `.csv` means CSV, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Binary,
        }
    }
}

fn columns(sd: usize, ad: usize) -> Vec<String> {
    let mut cols: Vec<String> = (0..sd).map(|i| format!("s{i}")).collect();
    cols.extend((0..ad).map(|i| format!("a{i}")));
    cols.push("r".into());
    cols.extend((0..sd).map(|i| format!("sn{i}")));
    cols.push("done".into());
    cols
}

pub fn write_csv<W: Write>(ds: &OfflineDataset, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    writeln!(out, "# {}", serde_json::to_string(&ds.meta)?)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns(ds.state_dim(), ds.action_dim()))?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = Vec::new();
        rec.extend(ds.states.row(i).iter().map(f64::to_string));
        rec.extend(ds.actions.row(i).iter().map(f64::to_string));
        rec.push(ds.rewards.data()[i].to_string());
        rec.extend(ds.next_states.row(i).iter().map(f64::to_string));
        rec.push(ds.dones.data()[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn count_prefixed(header: &csv::StringRecord, prefix: &str) -> usize {
    header
        .iter()
        .filter(|h| h.strip_prefix(prefix).is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit())))
        .count()
}

pub fn read_csv<R: Read>(input: R) -> Result<OfflineDataset> {
    let mut input = BufReader::new(input);
    let mut meta: Option<DatasetMeta> = None;
    let mut first = String::new();
    // Metadata line, if any.
    loop {
        let buf = input.fill_buf()?;
        if buf.first() != Some(&b'#') {
            break;
        }
        first.clear();
        input.read_line(&mut first)?;
        if meta.is_none() {
            let text = first.trim_start_matches('#').trim();
            if !text.is_empty() {
                meta = Some(serde_json::from_str(text).map_err(|e| Error::Format(format!("metadata line: {e}")))?);
            }
        }
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let header = rdr.headers()?.clone();
    let (sd, ad) = match &meta {
        Some(m) => (m.state_dim, m.action_dim),
        None => (count_prefixed(&header, "s"), count_prefixed(&header, "a")),
    };
    let want = columns(sd, ad);
    let mut pos = Vec::with_capacity(want.len());
    for name in &want {
        match header.iter().position(|h| h.trim() == name) {
            Some(p) => pos.push(p),
            None => return Err(Error::Format(format!("missing column '{name}'"))),
        }
    }
    let mut vals: Vec<Vec<f64>> = vec![Vec::new(); want.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (k, &p) in pos.iter().enumerate() {
            let field = rec.get(p).ok_or_else(|| Error::Format(format!("row {row}: missing field '{}'", want[k])))?;
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("row {row}: bad number '{field}' in column '{}'", want[k])))?;
            if !v.is_finite() {
                return Err(Error::Format(format!("row {row}: non-finite value in column '{}'", want[k])));
            }
            vals[k].push(v);
        }
    }
    let n = vals.last().map_or(0, Vec::len);
    let gather = |range: std::ops::Range<usize>| -> Result<Tensor> {
        let w = range.len();
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend(range.clone().map(|k| vals[k][i]));
        }
        Tensor::matrix(n, w, data)
    };
    let s = gather(0..sd)?;
    let a = gather(sd..sd + ad)?;
    let r = gather(sd + ad..sd + ad + 1)?;
    let sn = gather(sd + ad + 1..2 * sd + ad + 1)?;
    let d = gather(2 * sd + ad + 1..2 * sd + ad + 2)?;
    OfflineDataset::new(s, a, r, sn, d, meta.unwrap_or_default())
}

fn put_f64s(out: &mut impl Write, t: &Tensor) -> Result<()> {
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_binary<W: Write>(ds: &OfflineDataset, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    let meta = serde_json::to_vec(&ds.meta)?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(meta.len() as u32).to_le_bytes())?;
    out.write_all(&meta)?;
    for v in [ds.len(), ds.state_dim(), ds.action_dim()] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    for t in [&ds.states, &ds.actions, &ds.rewards, &ds.next_states, &ds.dones] {
        put_f64s(&mut out, t)?;
    }
    out.flush()?;
    Ok(())
}

fn take<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("file is truncated".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn take_tensor(input: &mut impl Read, rows: usize, cols: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(f64::from_le_bytes(take::<8>(input)?));
    }
    Tensor::matrix(rows, cols, data)
}

pub fn read_binary<R: Read>(input: R) -> Result<OfflineDataset> {
    let mut input = BufReader::new(input);
    if &take::<4>(&mut input)? != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take::<4>(&mut input)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let len = u32::from_le_bytes(take::<4>(&mut input)?) as usize;
    let mut meta = vec![0u8; len];
    input.read_exact(&mut meta).map_err(|_| Error::Format("file is truncated".into()))?;
    let meta: DatasetMeta = serde_json::from_slice(&meta)?;
    let n = u64::from_le_bytes(take::<8>(&mut input)?) as usize;
    let sd = u64::from_le_bytes(take::<8>(&mut input)?) as usize;
    let ad = u64::from_le_bytes(take::<8>(&mut input)?) as usize;
    let s = take_tensor(&mut input, n, sd)?;
    let a = take_tensor(&mut input, n, ad)?;
    let r = take_tensor(&mut input, n, 1)?;
    let sn = take_tensor(&mut input, n, sd)?;
    let d = take_tensor(&mut input, n, 1)?;
    OfflineDataset::new(s, a, r, sn, d, meta)
}

pub fn save_dataset(ds: &OfflineDataset, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    match DatasetFormat::from_path(path) {
        DatasetFormat::Csv => write_csv(ds, file),
        DatasetFormat::Binary => write_binary(ds, file),
    }
}

/// Loads either format, recognizing binary files by their magic bytes.
pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    let mut file = File::open(path)?;
    let mut head = [0u8; 4];
    let got = file.read(&mut head)?;
    drop(file);
    let file = File::open(path)?;
    if got == 4 && &head == MAGIC {
        read_binary(file)
    } else {
        read_csv(file)
    }
}
