use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::Context;
use flowpolicy::checkpoint::{self, critic_checkpoint, critic_from_checkpoint, model_checkpoint, model_from_checkpoint};
use flowpolicy::critic::{train_critic, ActionValue, Critic, IqlLosses, LinearCritic};
use flowpolicy::data::{
    load_dataset, make_swiss_roll, make_tabular, make_tilted_gaussian_bandit, nearest_distances, save_dataset,
    OfflineDataset, TabularMdp,
};
use flowpolicy::likelihood::log_prob_values;
use flowpolicy::model::GenerativeModel;
use flowpolicy::numerics::{Tensor, Var};
use flowpolicy::policy::{
    pretrain_behavior, train_gmpg, train_gmpo, write_metrics, GenerativePolicy, GmpgConfig, GmpoConfig, MetricsRow,
    WeightMode,
};
use flowpolicy::sampler::generate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{config_err, ensure, missing, CriticKind, ExperimentConfig, PolicyScheme, TaskConfig};

pub struct Stage {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

enum AnyCritic {
    Learned(Critic),
    Analytic(LinearCritic),
}

impl ActionValue for AnyCritic {
    fn q_var<'t>(&self, s: &Tensor, a: Var<'t>) -> flowpolicy::Result<Var<'t>> {
        match self {
            AnyCritic::Learned(c) => c.q_var(s, a),
            AnyCritic::Analytic(c) => c.q_var(s, a),
        }
    }

    fn q_values(&self, s: &Tensor, a: &Tensor) -> flowpolicy::Result<Tensor> {
        match self {
            AnyCritic::Learned(c) => c.q_values(s, a),
            AnyCritic::Analytic(c) => c.q_values(s, a),
        }
    }

    fn v_values(&self, s: &Tensor) -> flowpolicy::Result<Tensor> {
        match self {
            AnyCritic::Learned(c) => c.v_values(s),
            AnyCritic::Analytic(c) => c.v_values(s),
        }
    }
}

impl Stage {
    /// Creates the output directory and echoes the resolved config into it.
    pub fn start(cfg: ExperimentConfig, out: PathBuf, name: &str) -> anyhow::Result<Self> {
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let text = cfg.to_toml()?;
        fs::write(out.join(format!("resolved-{name}.toml")), text)?;
        Ok(Self { cfg, out })
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed)
    }

    fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    fn dataset_path(&self) -> PathBuf {
        match self.cfg.output.dataset_format.as_str() {
            "binary" => self.path("dataset.bin"),
            _ => self.path("dataset.csv"),
        }
    }

    fn dataset(&self) -> anyhow::Result<OfflineDataset> {
        let p = self.dataset_path();
        if !p.exists() {
            return Err(missing("dataset", &p, "make-data"));
        }
        Ok(load_dataset(&p)?)
    }

    fn critic(&self) -> anyhow::Result<AnyCritic> {
        match (self.cfg.critic.kind, &self.cfg.task) {
            (CriticKind::Analytic, TaskConfig::TiltedBandit { dims, beta, .. }) => {
                Ok(AnyCritic::Analytic(LinearCritic { w: vec![1.0; *dims], c: 0.0, v: beta * *dims as f64 / 2.0 }))
            }
            (CriticKind::Analytic, _) => Err(config_err("critic.kind = analytic is only defined for the tilted bandit")),
            (CriticKind::Iql, _) => {
                let p = self.path("critic.ckpt");
                if !p.exists() {
                    return Err(missing("critic checkpoint", &p, "train-critic"));
                }
                Ok(AnyCritic::Learned(critic_from_checkpoint(&checkpoint::load(&p)?)?))
            }
        }
    }

    fn checkpoint_path(&self, name: &str) -> PathBuf {
        match name {
            "behavior" => self.path("behavior.ckpt"),
            "gmpo" => self.path("gmpo.ckpt"),
            "gmpg" => self.path("gmpg.ckpt"),
            "policy" => match self.cfg.policy.scheme {
                PolicyScheme::Gmpo => self.path("gmpo.ckpt"),
                PolicyScheme::Gmpg => self.path("gmpg.ckpt"),
            },
            other => PathBuf::from(other),
        }
    }

    fn policy(&self, name: &str) -> anyhow::Result<GenerativePolicy> {
        let p = self.checkpoint_path(name);
        if !p.exists() {
            let stage = match name {
                "behavior" => "pretrain",
                "gmpg" => "train-gmpg",
                _ => "train-gmpo",
            };
            return Err(missing("policy checkpoint", &p, stage));
        }
        let model = model_from_checkpoint(&checkpoint::load(&p)?)?;
        Ok(GenerativePolicy::new(model, self.cfg.solver)?)
    }

    fn save_policy(&self, policy: &GenerativePolicy, file: &str, stage: &str) -> anyhow::Result<()> {
        let extra = json!({ "stage": stage, "seed": self.cfg.seed, "solver": policy.solver });
        checkpoint::save(&self.path(file), &model_checkpoint(&policy.model, extra)?)?;
        Ok(())
    }

    fn save_metrics(&self, file: &str, rows: &[MetricsRow]) -> anyhow::Result<()> {
        let every = self.cfg.output.metrics_every;
        let kept: Vec<MetricsRow> =
            rows.iter().filter(|r| r.step % every == 0 || r.step == rows.len()).copied().collect();
        write_metrics(File::create(self.path(file))?, &kept)?;
        Ok(())
    }

    fn fresh_policy(&self, ds: &OfflineDataset, rng: &mut ChaCha8Rng) -> anyhow::Result<GenerativePolicy> {
        let model = GenerativeModel::new(self.cfg.model.clone(), ds.action_dim(), ds.state_dim(), rng)?;
        Ok(GenerativePolicy::new(model, self.cfg.solver)?)
    }

    fn eval_states(&self, ds: &OfflineDataset, n: usize, rng: &mut ChaCha8Rng) -> anyhow::Result<Tensor> {
        let idx = ds.sample_indices(n, rng)?;
        Ok(ds.states.select_rows(&idx))
    }

    pub fn make_data(&self) -> anyhow::Result<String> {
        let seed = self.cfg.seed;
        let ds = match &self.cfg.task {
            TaskConfig::TiltedBandit { dims, beta, n } => make_tilted_gaussian_bandit(*dims, *beta, *n, seed)?.0,
            TaskConfig::SwissRoll { .. } => make_swiss_roll(&self.cfg.task.swiss_roll(seed).expect("swiss roll task"))?,
            TaskConfig::TabularChain { states, n } => {
                ensure(*states >= 2, "task.states must be at least 2")?;
                make_tabular(&TabularMdp::chain(*states), *n, seed)?
            }
            TaskConfig::File { path } => {
                if !path.exists() {
                    return Err(config_err(format!("task.path {} does not exist", path.display())));
                }
                load_dataset(path)?
            }
        };
        let path = self.dataset_path();
        save_dataset(&ds, &path)?;
        Ok(format!("wrote {} transitions to {}", ds.len(), path.display()))
    }

    pub fn pretrain(&self) -> anyhow::Result<String> {
        let ds = self.dataset()?;
        let mut rng = self.rng();
        let mut policy = self.fresh_policy(&ds, &mut rng)?;
        let log = pretrain_behavior(&ds, &mut policy, &self.cfg.matching, &self.cfg.pretrain, &mut rng)?;
        self.save_policy(&policy, "behavior.ckpt", "pretrain")?;
        self.save_metrics("pretrain_metrics.csv", &log)?;
        Ok(format!("final loss {:e}", log.last().map_or(f64::NAN, |r| r.loss)))
    }

    pub fn train_critic(&self) -> anyhow::Result<String> {
        if self.cfg.critic.kind == CriticKind::Analytic {
            return Ok("critic.kind = analytic: nothing to train".into());
        }
        let ds = self.dataset()?;
        let mut rng = self.rng();
        let (critic, log) = train_critic(&ds, &self.cfg.critic.iql(), &mut rng)?;
        checkpoint::save(&self.path("critic.ckpt"), &critic_checkpoint(&critic, json!({ "seed": self.cfg.seed }))?)?;
        write_critic_metrics(&self.path("critic_metrics.csv"), &log, self.cfg.output.metrics_every)?;
        let last = log.last().copied().unwrap_or(IqlLosses { v_loss: f64::NAN, q_loss: f64::NAN });
        Ok(format!("final v_loss {:e}, q_loss {:e}", last.v_loss, last.q_loss))
    }

    pub fn train_gmpo(&self) -> anyhow::Result<String> {
        let ds = self.dataset()?;
        let critic = self.critic()?;
        let behavior = match self.cfg.policy.weight {
            WeightMode::Softmax { .. } => Some(self.policy("behavior")?),
            WeightMode::Exponential { .. } => None,
        };
        let mut rng = self.rng();
        let mut policy = self.fresh_policy(&ds, &mut rng)?;
        let cfg = GmpoConfig {
            beta: self.cfg.policy.beta,
            weight: self.cfg.policy.weight,
            matching: self.cfg.matching,
            train: self.cfg.policy.gmpo_train.clone(),
        };
        let log = train_gmpo(&ds, &critic, &mut policy, behavior.as_ref(), &cfg, &mut rng)?;
        self.save_policy(&policy, "gmpo.ckpt", "train-gmpo")?;
        self.save_metrics("gmpo_metrics.csv", &log)?;
        Ok(format!("final loss {:e}", log.last().map_or(f64::NAN, |r| r.loss)))
    }

    pub fn train_gmpg(&self) -> anyhow::Result<String> {
        let ds = self.dataset()?;
        let critic = self.critic()?;
        let behavior = self.policy("behavior")?;
        if behavior.model.parameterization() != flowpolicy::schedules::Parameterization::Velocity {
            return Err(config_err("train-gmpg needs a velocity-parameterized behavior model"));
        }
        let mut rng = self.rng();
        let cfg = GmpgConfig {
            beta: self.cfg.policy.beta,
            solver: self.cfg.policy.gmpg_solver,
            trace: self.cfg.policy.gmpg_trace,
            variant: self.cfg.policy.gmpg_variant,
            train: self.cfg.policy.gmpg_train.clone(),
        };
        let (policy, log) = train_gmpg(&ds, &critic, &behavior, &cfg, &mut rng)?;
        self.save_policy(&policy, "gmpg.ckpt", "train-gmpg")?;
        self.save_metrics("gmpg_metrics.csv", &log)?;
        Ok(format!("final objective {:e}", log.last().map_or(f64::NAN, |r| r.loss)))
    }

    pub fn sample(&self, name: &str, n: Option<usize>) -> anyhow::Result<String> {
        let ds = self.dataset()?;
        let policy = self.policy(name)?;
        let mut rng = self.rng();
        let s = self.eval_states(&ds, n.unwrap_or(self.cfg.eval.samples), &mut rng)?;
        let a = policy.act(&s, &mut rng)?;
        let path = self.path(&format!("samples_{}.csv", file_tag(name)));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header: Vec<String> = (0..s.cols()).map(|j| format!("s{j}")).collect();
        header.extend((0..a.cols()).map(|j| format!("a{j}")));
        w.write_record(&header)?;
        for i in 0..s.rows() {
            w.write_record(s.row(i).iter().chain(a.row(i)).map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(format!("wrote {} samples to {}", s.rows(), path.display()))
    }

    pub fn logprob(&self, name: &str, input: Option<&Path>, n: Option<usize>) -> anyhow::Result<String> {
        let ds = match input {
            Some(p) => {
                if !p.exists() {
                    return Err(config_err(format!("input {} does not exist", p.display())));
                }
                load_dataset(p)?
            }
            None => self.dataset()?,
        };
        let policy = self.policy(name)?;
        let rows = n.unwrap_or(ds.len()).min(ds.len());
        let (s, a) = (ds.states.slice_rows(0, rows), ds.actions.slice_rows(0, rows));
        let mut rng = self.rng();
        let lk = &self.cfg.likelihood;
        let (lp, se) = log_prob_values(&policy.model, &a, Some(&s), &lk.solver, &lk.trace, &mut rng)?;
        let path = self.path(&format!("logprob_{}.csv", file_tag(name)));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["row", "log_prob", "stderr"])?;
        for (i, l) in lp.iter().enumerate() {
            let e = se.as_ref().map(|s| s[i].to_string()).unwrap_or_default();
            w.write_record([i.to_string(), l.to_string(), e])?;
        }
        w.flush()?;
        let mean = lp.iter().sum::<f64>() / lp.len().max(1) as f64;
        Ok(format!("mean log-likelihood {mean:.4} over {rows} rows -> {}", path.display()))
    }

    pub fn eval(&self, name: &str) -> anyhow::Result<String> {
        let ds = self.dataset()?;
        let policy = self.policy(name)?;
        let mut rng = self.rng();
        let s = self.eval_states(&ds, self.cfg.eval.samples, &mut rng)?;
        let a = policy.act(&s, &mut rng)?;
        let mut report = json!({
            "checkpoint": name,
            "samples": a.rows(),
            "action_mean": a.column_means(),
            "action_std": a.column_stds(),
        });
        let critic = match (self.cfg.critic.kind, self.path("critic.ckpt").exists()) {
            (CriticKind::Analytic, _) | (CriticKind::Iql, true) => Some(self.critic()?),
            _ => None,
        };
        if let Some(c) = critic {
            report["mean_q"] = json!(c.q_values(&s, &a)?.mean());
        }
        match &self.cfg.task {
            TaskConfig::TiltedBandit { dims, beta, .. } => {
                report["target_mean"] = json!(vec![*beta; *dims]);
            }
            TaskConfig::SwissRoll { .. } => {
                let task = self.cfg.task.swiss_roll(self.cfg.seed).expect("swiss roll task");
                let values = task.value_of_points(&a)?;
                let dist = nearest_distances(&a, &ds.actions)?;
                report["mean_value"] = json!(mean(&values));
                report["dataset_mean_value"] = json!(task.mean_value());
                report["mean_nearest_distance"] = json!(mean(&dist));
            }
            _ => {}
        }
        let text = serde_json::to_string_pretty(&report)?;
        fs::write(self.path(&format!("eval_{}.json", file_tag(name))), &text)?;
        Ok(text)
    }

    pub fn export_trajectories(&self, name: &str, n: Option<usize>) -> anyhow::Result<String> {
        let ds = self.dataset()?;
        let policy = self.policy(name)?;
        let mut rng = self.rng();
        let n = n.unwrap_or(self.cfg.eval.trajectories);
        let s = self.eval_states(&ds, n, &mut rng)?;
        let g = generate(&policy.model, n, &self.cfg.solver, Some(&s), &mut rng, true)?;
        let traj = g.trajectory.expect("recorded trajectory");
        let path = self.path(&format!("trajectories_{}.csv", file_tag(name)));
        traj.write_csv(File::create(&path)?)?;
        Ok(format!("wrote {} samples x {} grid points to {}", n, traj.len(), path.display()))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn file_tag(name: &str) -> String {
    Path::new(name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| name.to_string())
}

fn write_critic_metrics(path: &Path, log: &[IqlLosses], every: usize) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "v_loss", "q_loss"])?;
    for (i, l) in log.iter().enumerate() {
        let step = i + 1;
        if step % every == 0 || step == log.len() {
            w.write_record([step.to_string(), format!("{:e}", l.v_loss), format!("{:e}", l.q_loss)])?;
        }
    }
    w.flush()?;
    Ok(())
}
