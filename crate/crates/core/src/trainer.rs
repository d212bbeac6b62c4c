//! Training loop, run configuration, checkpoints and run logs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{augment_labeled_batch, make_batch_views, AugmentConfig};
use crate::datasets::{batch_schedule, make_split, BatchSchedule, SampleRecord, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::featperturb::PerturbConfig;
use crate::losses::{supervised_loss, unlabeled_losses, IpStream, LossConfig, LossReport, UnlabeledTerms};
use crate::manifest::{content_hash, fingerprint_split, RunManifest};
use crate::metrics::{evaluate_model, MetricsReport};
use crate::model::{ExecMode, Invocations, NetConfig, Stream, StreamPlan, UNet, ViewBatch};
use crate::optim::{apply_update, OptimConfig, OptimState};
use crate::raster::{images_to_tensor, masks_to_labels, Image, Mask};
use crate::rng::{derive, tag};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// All seven streams with tkd, dkd and ip.
    Crossmatch,
    /// Teacher plus one strong image view, ip only.
    Fixmatch,
    /// Crossmatch with tkd restricted to `{p_w_w, p_s_s}`.
    Dualstream,
    SupervisedOnly,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Crossmatch => "crossmatch",
            Method::Fixmatch => "fixmatch",
            Method::Dualstream => "dualstream",
            Method::SupervisedOnly => "supervised_only",
        }
    }

    /// Loss configuration actually used by this method.
    pub fn effective_loss(self, base: &LossConfig) -> LossConfig {
        let mut cfg = base.clone();
        match self {
            Method::Crossmatch => {}
            Method::Fixmatch => {
                cfg.tkd_students.clear();
                cfg.dkd_terms.clear();
                cfg.ip_streams = vec![IpStream::S1];
            }
            Method::Dualstream => cfg.tkd_students = vec![Stream::WeakWeak, Stream::StrongStrong],
            Method::SupervisedOnly => {
                cfg.tkd_students.clear();
                cfg.dkd_terms.clear();
                cfg.ip_streams.clear();
            }
        }
        cfg
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crossmatch" => Ok(Method::Crossmatch),
            "fixmatch" => Ok(Method::Fixmatch),
            "dualstream" => Ok(Method::Dualstream),
            "supervised_only" => Ok(Method::SupervisedOnly),
            other => Err(Error::config(format!("unknown method {other:?}"))),
        }
    }
}

fn default_method() -> Method {
    Method::Crossmatch
}
fn default_iterations() -> usize {
    2000
}
fn default_batch() -> usize {
    8
}
fn default_chunk() -> usize {
    16
}

/// Config section `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Half labeled, half unlabeled.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate on the validation set every `n` steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
    /// 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// One encoder call per view and one decoder call per stream.
    #[serde(default)]
    pub naive_mode: bool,
    #[serde(default = "default_chunk")]
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: default_method(),
            iterations: default_iterations(),
            batch_size: default_batch(),
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            naive_mode: false,
            eval_chunk: default_chunk(),
        }
    }
}

fn default_fraction() -> f64 {
    0.1
}

/// Config section `data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_fraction")]
    pub labeled_fraction: f64,
    /// Defaults to `train.seed`.
    #[serde(default)]
    pub split_seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            labeled_fraction: default_fraction(),
            split_seed: None,
        }
    }
}

/// The complete run configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub perturb: PerturbConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Validate every section and normalize subset orderings.
    pub fn validate(&mut self) -> Result<()> {
        self.net.validate()?;
        self.optim.validate()?;
        self.loss.validate()?;
        self.perturb.validate()?;
        self.augment.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.batch_size % 2 != 0 {
            return Err(Error::config(format!("train.batch_size {} must be even and positive", t.batch_size)));
        }
        if t.eval_chunk == 0 {
            return Err(Error::config("train.eval_chunk must be positive"));
        }
        let f = self.data.labeled_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::config(format!("data.labeled_fraction {f} must lie in (0, 1]")));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        content_hash(self)
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            labeled_fraction: self.data.labeled_fraction,
            seed: self.data.split_seed.unwrap_or(self.train.seed),
            num_classes: self.net.num_classes,
        }
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: Vec<f32>,
    pub optim: OptimState,
    pub step: usize,
}

/// One step's outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub report: LossReport,
    pub lr: f64,
    pub invocations: Invocations,
    /// Seed of the step's random substream, hex.
    pub rng: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub report: MetricsReport,
}

/// Append-only record of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub losses: Vec<LossRow>,
    pub metrics: Vec<MetricsRow>,
    pub step_ms: Vec<f64>,
}

pub const LOSS_HEADER: &str =
    "step,sup,ip,tkd,dkd,total,lr,cov_p_w_n,cov_p_w_w,cov_p_w_s,encoder_calls,decoder_calls,rng";

impl LossRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        let cov = |k: &str| r.mask_coverage.get(k).map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            r.sup,
            r.ip,
            r.tkd,
            r.dkd,
            r.total,
            self.lr,
            cov("p_w_n"),
            cov("p_w_w"),
            cov("p_w_s"),
            self.invocations.encoder,
            self.invocations.decoder,
            self.rng
        )
    }
}

/// Held-out images with masks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalSet {
    pub ids: Vec<String>,
    pub images: Vec<Image>,
    pub masks: Vec<Mask>,
}

impl EvalSet {
    pub fn from_records(records: &[SampleRecord]) -> Result<Self> {
        let mut set = EvalSet::default();
        for r in records {
            let m = r
                .mask
                .clone()
                .ok_or_else(|| Error::data(format!("evaluation sample {} has no mask", r.id)))?;
            set.ids.push(r.id.clone());
            set.images.push(r.image.clone());
            set.masks.push(m);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn evaluate(&self, net: &UNet, params: &[f32], chunk: usize) -> Result<MetricsReport> {
        let images: Vec<&Image> = self.images.iter().collect();
        let masks: Vec<&Mask> = self.masks.iter().collect();
        evaluate_model(net, params, &self.ids, &images, &masks, chunk)
    }
}

/// Drives individual optimization steps.
pub struct Trainer<'a> {
    cfg: RunConfig,
    loss: LossConfig,
    plan: StreamPlan,
    net: UNet,
    split: &'a Split,
    schedule: BatchSchedule,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(mut cfg: RunConfig, split: &'a Split) -> Result<Self> {
        cfg.validate()?;
        let net = UNet::new(cfg.net.clone())?;
        let mut loss = cfg.train.method.effective_loss(&cfg.loss);
        loss.validate()?;
        let plan = if loss.required_streams().len() > 1 {
            StreamPlan::new(loss.required_streams())?
        } else {
            StreamPlan::new(Vec::new())?
        };
        if !plan.is_empty() && split.unlabeled.is_empty() {
            return Err(Error::config(format!(
                "method {} needs unlabeled samples but the unlabeled pool is empty",
                cfg.train.method.name()
            )));
        }
        for s in &split.labeled {
            if s.image.channels != cfg.net.in_channels {
                return Err(Error::data(format!(
                    "{}: {} channels but net.in_channels = {}",
                    s.id, s.image.channels, cfg.net.in_channels
                )));
            }
        }
        let schedule = batch_schedule(
            split.labeled.len(),
            split.unlabeled.len(),
            cfg.train.batch_size,
            cfg.train.iterations,
            cfg.train.seed,
        )?;
        let params = net.init_params(cfg.train.seed);
        let n = params.len();
        Ok(Trainer {
            cfg,
            loss,
            plan,
            net,
            split,
            schedule,
            state: TrainState {
                params,
                optim: OptimState::new(n),
                step: 0,
            },
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn plan(&self) -> &StreamPlan {
        &self.plan
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn set_state(&mut self, state: TrainState) -> Result<()> {
        if state.params.len() != self.net.num_params() || state.optim.first.len() != state.params.len() {
            return Err(Error::data(format!(
                "state has {} parameters, network expects {}",
                state.params.len(),
                self.net.num_params()
            )));
        }
        self.state = state;
        Ok(())
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn set_exec_mode(&mut self, naive: bool) {
        self.cfg.train.naive_mode = naive;
    }

    fn step_seed(&self, step: usize) -> u64 {
        derive(self.cfg.train.seed, &[tag::STEP, step as u64])
    }

    /// Gradient of the total loss at the current parameters for step `step`'s batch.
    pub fn compute_gradients(&self, step: usize) -> Result<(Vec<f32>, LossReport, Invocations)> {
        let batch = self.schedule.batch_at(step);
        let seed = self.cfg.train.seed;
        let params = &self.state.params;
        let mut grads = vec![0.0f32; params.len()];
        let mut inv = Invocations::default();

        let terms: UnlabeledTerms<f32> = if self.plan.is_empty() {
            UnlabeledTerms {
                ip: 0.0,
                tkd: 0.0,
                dkd: 0.0,
                grads: BTreeMap::new(),
                coverage: BTreeMap::new(),
            }
        } else {
            let images: Vec<&Image> = batch.unlabeled.iter().map(|&i| &self.split.unlabeled[i].image).collect();
            let views = make_batch_views(&images, &self.cfg.augment, seed, step as u64)?;
            let as_refs = |v: &[Image]| images_to_tensor::<f32>(&v.iter().collect::<Vec<_>>());
            let vb = ViewBatch {
                weak: as_refs(&views.weak),
                strong1: as_refs(&views.strong1),
                strong2: as_refs(&views.strong2),
                mix_s1: views.mix_s1,
                mix_s2: views.mix_s2,
            };
            let mode = if self.cfg.train.naive_mode {
                ExecMode::Naive
            } else {
                ExecMode::Stacked
            };
            let (set, tape) = self.net.forward_streams(
                params,
                &vb,
                &self.plan,
                &self.cfg.perturb,
                self.step_seed(step),
                mode,
                &mut inv,
            )?;
            let terms = unlabeled_losses(&set, &self.loss)?;
            self.net.backward_streams(params, &mut grads, &tape, &terms.grads)?;
            terms
        };

        let lab: Vec<(&Image, &Mask)> = batch
            .labeled
            .iter()
            .map(|&i| (&self.split.labeled[i].image, &self.split.labeled[i].mask))
            .collect();
        let aug = augment_labeled_batch(&lab, &self.cfg.augment, seed, step as u64)?;
        let x: Tensor<f32> = images_to_tensor(&aug.iter().map(|a| &a.0).collect::<Vec<_>>());
        let labels = masks_to_labels(&aug.iter().map(|a| &a.1).collect::<Vec<_>>());
        let (logits, tape) = self.net.forward_supervised(params, &x)?;
        let (sup, dlogits) = supervised_loss(&logits, &labels, self.loss.dice_smooth);
        self.net.backward_supervised(params, &mut grads, &tape, &dlogits);

        let report = LossReport::new(sup, &terms, self.loss.eta);
        Ok((grads, report, inv))
    }

    /// One optimization step. Non-finite losses or gradients abort with a
    /// per-term diagnostic.
    pub fn train_step(&mut self) -> Result<LossRow> {
        let step = self.state.step;
        if step >= self.cfg.train.iterations {
            return Err(Error::config(format!(
                "step {step} is past the configured {} iterations",
                self.cfg.train.iterations
            )));
        }
        let (grads, report, inv) = self.compute_gradients(step)?;
        if !report.is_finite() || !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite values at step {step}: sup={} ip={} tkd={} dkd={} total={} finite_grads={}",
                report.sup,
                report.ip,
                report.tkd,
                report.dkd,
                report.total,
                grads.iter().all(|g| g.is_finite())
            )));
        }
        let lr = self.cfg.optim.lr_at(step, self.cfg.train.iterations);
        apply_update(&self.cfg.optim, &mut self.state.optim, &mut self.state.params, &grads, lr);
        self.state.step += 1;
        Ok(LossRow {
            step,
            report,
            lr,
            invocations: inv,
            rng: format!("{:016x}", self.step_seed(step)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    step: usize,
    config_hash: String,
    seed: u64,
    optim_t: u64,
    num_params: usize,
}

pub fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join(format!("ckpt_{step:06}"))
}

fn write_f32(path: &Path, v: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::data(format!("{} is not a whole number of f32 values", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Write `state.json`, `params.bin` and `optim.bin` plus the config used.
pub fn save_checkpoint(dir: &Path, cfg: &RunConfig, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = CheckpointMeta {
        step: state.step,
        config_hash: cfg.hash()?,
        seed: cfg.train.seed,
        optim_t: state.optim.t,
        num_params: state.params.len(),
    };
    let p = dir.join("state.json");
    fs::write(&p, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&p, e))?;
    let c = dir.join("config.toml");
    fs::write(&c, cfg.to_toml()?).map_err(|e| Error::io(&c, e))?;
    write_f32(&dir.join("params.bin"), &state.params)?;
    write_f32(&dir.join("optim.bin"), &state.optim.flatten())
}

/// Load a checkpoint. With `expect_hash`, a differing config hash is refused.
pub fn load_checkpoint(dir: &Path, expect_hash: Option<&str>) -> Result<(TrainState, RunConfig)> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint directory not found"),
        ));
    }
    let p = dir.join("state.json");
    let meta: CheckpointMeta =
        serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
    if let Some(h) = expect_hash {
        if h != meta.config_hash {
            return Err(Error::config(format!(
                "refusing to resume: checkpoint config hash {} differs from current {}",
                meta.config_hash, h
            )));
        }
    }
    let cfg = RunConfig::load(&dir.join("config.toml"))?;
    let params = read_f32(&dir.join("params.bin"))?;
    if params.len() != meta.num_params {
        return Err(Error::data("params.bin length disagrees with state.json"));
    }
    let optim = OptimState::unflatten(&read_f32(&dir.join("optim.bin"))?, meta.optim_t)?;
    Ok((
        TrainState {
            params,
            optim,
            step: meta.step,
        },
        cfg,
    ))
}

/// Run-directory writers for `losses.csv`, `timing.csv` and `metrics.jsonl`.
struct LogFiles {
    losses: fs::File,
    timing: fs::File,
    metrics: fs::File,
    dir: PathBuf,
}

/// Keep the header and rows whose leading step is `< keep_before`.
fn truncate_rows(path: &Path, header: Option<&str>, keep_before: usize, step_of: impl Fn(&str) -> Option<usize>) -> Result<()> {
    let mut kept = String::new();
    if let Some(h) = header {
        kept.push_str(h);
        kept.push('\n');
    }
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines() {
            if Some(line) == header || line.is_empty() {
                continue;
            }
            if step_of(line).is_some_and(|s| s < keep_before) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn csv_step(line: &str) -> Option<usize> {
    line.split(',').next()?.parse().ok()
}

fn json_step(line: &str) -> Option<usize> {
    serde_json::from_str::<serde_json::Value>(line).ok()?.get("step")?.as_u64().map(|v| v as usize)
}

impl LogFiles {
    fn open(dir: &Path, start: usize) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lp = dir.join("losses.csv");
        let tp = dir.join("timing.csv");
        let mp = dir.join("metrics.jsonl");
        truncate_rows(&lp, Some(LOSS_HEADER), start, csv_step)?;
        truncate_rows(&tp, Some("step,ms"), start, csv_step)?;
        // metrics rows carry the number of completed steps
        truncate_rows(&mp, None, start + 1, json_step)?;
        let open = |p: &Path| {
            fs::OpenOptions::new()
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))
        };
        Ok(LogFiles {
            losses: open(&lp)?,
            timing: open(&tp)?,
            metrics: open(&mp)?,
            dir: dir.to_path_buf(),
        })
    }

    fn loss(&mut self, row: &LossRow, ms: f64) -> Result<()> {
        writeln!(self.losses, "{}", row.csv()).map_err(|e| Error::io(self.dir.join("losses.csv"), e))?;
        writeln!(self.timing, "{},{ms:.3}", row.step).map_err(|e| Error::io(self.dir.join("timing.csv"), e))
    }

    fn metric(&mut self, step: usize, r: &MetricsReport) -> Result<()> {
        let line = serde_json::to_string(&r.summary_json(Some(step)))?;
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(self.dir.join("metrics.jsonl"), e))
    }
}

/// Runtime options of [`fit`] that do not affect numerics.
#[derive(Clone, Debug, Default)]
pub struct FitOptions<'p> {
    pub out_dir: Option<&'p Path>,
    pub resume: Option<&'p Path>,
    /// Stop after this many completed steps (checkpointing there) instead of
    /// running to `train.iterations`.
    pub stop_at: Option<usize>,
    pub val: Option<&'p EvalSet>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub state: TrainState,
    pub log: RunLog,
    /// Evaluation of the final weights, when a validation set was given and
    /// the schedule completed.
    pub final_metrics: Option<MetricsReport>,
}

/// Run the schedule, logging every step and checkpointing as configured.
pub fn fit(cfg: &RunConfig, split: &Split, opts: &FitOptions) -> Result<FitResult> {
    let mut cfg = cfg.clone();
    cfg.validate()?;
    let mut trainer = Trainer::new(cfg.clone(), split)?;
    if let Some(dir) = opts.resume {
        let (state, _) = load_checkpoint(dir, Some(&cfg.hash()?))?;
        trainer.set_state(state)?;
        log::info!("resumed from {} at step {}", dir.display(), trainer.state().step);
    }
    let start = trainer.state().step;
    let total = cfg.train.iterations;
    let stop = opts.stop_at.map_or(total, |s| s.min(total));
    let mut files = match opts.out_dir {
        Some(dir) => {
            RunManifest::new("train", &cfg, fingerprint_split(split), cfg.train.seed)?.write(dir)?;
            Some(LogFiles::open(dir, start)?)
        }
        None => None,
    };
    let mut log = RunLog::default();
    let chunk = cfg.train.eval_chunk;
    let mut last_eval = None;
    while trainer.state().step < stop {
        let t0 = Instant::now();
        let row = match trainer.train_step() {
            Ok(r) => r,
            Err(e @ Error::Numeric(_)) => {
                if let Some(dir) = opts.out_dir {
                    let p = dir.join(format!("failure_step_{:06}.txt", trainer.state().step));
                    let _ = fs::write(&p, format!("{e}\n"));
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        if let Some(f) = files.as_mut() {
            f.loss(&row, ms)?;
        }
        log::debug!("step {} total {:.5} sup {:.5}", row.step, row.report.total, row.report.sup);
        log.losses.push(row);
        log.step_ms.push(ms);
        let done = trainer.state().step;
        if let Some(val) = opts.val {
            if cfg.train.eval_every > 0 && done % cfg.train.eval_every == 0 {
                let r = val.evaluate(trainer.net(), &trainer.state().params, chunk)?;
                if let Some(f) = files.as_mut() {
                    f.metric(done, &r)?;
                }
                log::info!("step {done}: val dice {:.2}", r.dice);
                log.metrics.push(MetricsRow { step: done, report: r.clone() });
                last_eval = Some((done, r));
            }
        }
        if let Some(dir) = opts.out_dir {
            if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 && done < stop {
                save_checkpoint(&checkpoint_dir(dir, done), &cfg, trainer.state())?;
            }
        }
    }
    let done = trainer.state().step;
    if let Some(dir) = opts.out_dir {
        save_checkpoint(&checkpoint_dir(dir, done), &cfg, trainer.state())?;
    }
    let mut final_metrics = None;
    if done == total {
        if let Some(val) = opts.val {
            let r = match last_eval {
                Some((s, r)) if s == done => r,
                _ => {
                    let r = val.evaluate(trainer.net(), &trainer.state().params, chunk)?;
                    if let Some(f) = files.as_mut() {
                        f.metric(done, &r)?;
                    }
                    log.metrics.push(MetricsRow { step: done, report: r.clone() });
                    r
                }
            };
            final_metrics = Some(r);
        }
    }
    Ok(FitResult {
        state: trainer.into_state(),
        log,
        final_metrics,
    })
}

/// Split `records` per `cfg.data` and run [`fit`].
pub fn fit_records(cfg: &RunConfig, records: &[SampleRecord], opts: &FitOptions) -> Result<FitResult> {
    let split = make_split(records, &cfg.split_spec())?;
    fit(cfg, &split, opts)
}

/// Mean wall-clock per step after warm-up, with per-step call counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCost {
    pub mean_ms: f64,
    pub encoder_calls: usize,
    pub decoder_calls: usize,
}

pub fn measure_step_cost(cfg: &RunConfig, split: &Split, warmup: usize, steps: usize) -> Result<StepCost> {
    let mut cfg = cfg.clone();
    cfg.train.iterations = warmup + steps.max(1);
    let mut trainer = Trainer::new(cfg, split)?;
    for _ in 0..warmup {
        trainer.train_step()?;
    }
    let t0 = Instant::now();
    let mut inv = Invocations::default();
    for _ in 0..steps.max(1) {
        inv = trainer.train_step()?.invocations;
    }
    Ok(StepCost {
        mean_ms: t0.elapsed().as_secs_f64() * 1e3 / steps.max(1) as f64,
        encoder_calls: inv.encoder,
        decoder_calls: inv.decoder,
    })
}
