//! Ablation grids: row generation, execution and the consolidated table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{load_folder, make_split, synth_generate, SampleRecord, SynthSpec};
use crate::error::{Error, Result};
use crate::featperturb::PerturbKind;
use crate::losses::{DkdTerm, HKind, IpStream, LossReport};
use crate::metrics::MetricsReport;
use crate::model::Stream;
use crate::trainer::{fit, EvalSet, FitOptions, LossRow, RunConfig};

/// One ablation axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// `L^w_dkd` / `L^s_dkd` on or off, per split.
    Dkd,
    /// Subsets of the four tkd students.
    Tkd,
    /// `p^{s1}` / `p^{s2}` supervision on or off, per split.
    Ip,
    /// Distillation loss family: KL at T=1 and T=2, CE, Dice; per split.
    HKind,
    Eta,
    /// Weak/strong dropout rate pairs.
    Gap,
    Tau,
    DropoutKind,
}

impl GridKind {
    pub const ALL: [GridKind; 8] = [
        GridKind::Dkd,
        GridKind::Tkd,
        GridKind::Ip,
        GridKind::HKind,
        GridKind::Eta,
        GridKind::Gap,
        GridKind::Tau,
        GridKind::DropoutKind,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GridKind::Dkd => "dkd",
            GridKind::Tkd => "tkd",
            GridKind::Ip => "ip",
            GridKind::HKind => "h_kind",
            GridKind::Eta => "eta",
            GridKind::Gap => "gap",
            GridKind::Tau => "tau",
            GridKind::DropoutKind => "dropout_kind",
        }
    }

    /// Whether rows are repeated for every entry of `splits`.
    pub fn per_split(self) -> bool {
        matches!(self, GridKind::Dkd | GridKind::Ip | GridKind::HKind | GridKind::DropoutKind)
    }
}

fn default_splits() -> Vec<f64> {
    vec![0.05, 0.1, 0.2]
}
fn default_single() -> f64 {
    0.1
}
fn default_taus() -> Vec<f64> {
    vec![0.75, 0.80, 0.85, 0.90, 0.95]
}

/// Contents of a grid file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub grids: Vec<GridKind>,
    /// Labeled fractions for per-split grids.
    #[serde(default = "default_splits")]
    pub splits: Vec<f64>,
    /// Labeled fraction for single-split grids.
    #[serde(default = "default_single")]
    pub single_split: f64,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    /// Overrides `base.train.iterations` for every row.
    #[serde(default)]
    pub iterations: Option<usize>,
    /// Configuration every row starts from.
    #[serde(default)]
    pub base: RunConfig,
    #[serde(default)]
    pub data: Option<GridData>,
}

/// Where a grid's training and validation samples come from: either two
/// folders (each with `images/` and `masks/`) or a synthetic spec whose last
/// `val_count` samples are held out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridData {
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub val: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub val_count: usize,
}

impl GridData {
    /// Training records and the validation set. Relative folders resolve against `root`.
    pub fn load(&self, root: &Path, num_classes: usize) -> Result<(Vec<SampleRecord>, Option<EvalSet>)> {
        let folder = |p: &Path| -> Result<Vec<SampleRecord>> {
            let dir = if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
            load_folder(&dir.join("images"), Some(&dir.join("masks")), num_classes)
        };
        match (&self.synth, &self.train) {
            (Some(spec), None) => {
                let mut recs = synth_generate(spec)?;
                if self.val_count >= recs.len() {
                    return Err(Error::config("data.val_count must be smaller than data.synth.count"));
                }
                let val = recs.split_off(recs.len() - self.val_count);
                let val = if val.is_empty() { None } else { Some(EvalSet::from_records(&val)?) };
                Ok((recs, val))
            }
            (None, Some(train)) => {
                let recs = folder(train)?;
                let val = match &self.val {
                    Some(v) => Some(EvalSet::from_records(&folder(v)?)?),
                    None => None,
                };
                Ok((recs, val))
            }
            _ => Err(Error::config("grid data needs exactly one of data.synth or data.train")),
        }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            grids: GridKind::ALL.to_vec(),
            splits: default_splits(),
            single_split: default_single(),
            taus: default_taus(),
            iterations: None,
            base: RunConfig::default(),
            data: None,
        }
    }
}

impl GridSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut spec: GridSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&mut self) -> Result<()> {
        if self.grids.is_empty() {
            return Err(Error::config("grid file lists no grids"));
        }
        if self.splits.is_empty() {
            return Err(Error::config("grid splits must not be empty"));
        }
        if let Some(n) = self.iterations {
            self.base.train.iterations = n;
        }
        self.base.validate()
    }

    /// The base with `iterations` applied.
    pub fn resolved_base(&self) -> RunConfig {
        let mut b = self.base.clone();
        if let Some(n) = self.iterations {
            b.train.iterations = n;
        }
        b
    }
}

/// One configuration of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub grid: GridKind,
    /// Axis name to value, as shown in the table.
    pub axes: BTreeMap<String, String>,
    pub config: RunConfig,
    /// Loss and perturbation settings equal the base configuration.
    pub full: bool,
}

impl AblationRow {
    pub fn label(&self) -> String {
        self.axes
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn mark(on: bool) -> String {
    if on { "✓" } else { "" }.to_string()
}

fn subset_name<T: Copy>(items: &[T], name: impl Fn(T) -> &'static str) -> String {
    if items.is_empty() {
        "none".to_string()
    } else {
        items.iter().map(|&t| name(t)).collect::<Vec<_>>().join("+")
    }
}

const TKD_ROWS: [&[Stream]; 7] = [
    &[Stream::WeakWeak, Stream::StrongStrong],
    &[Stream::StrongWeak, Stream::WeakStrong],
    &[Stream::StrongWeak, Stream::WeakStrong, Stream::StrongStrong],
    &[Stream::WeakWeak, Stream::WeakStrong, Stream::StrongStrong],
    &[Stream::WeakWeak, Stream::StrongWeak, Stream::StrongStrong],
    &[Stream::WeakWeak, Stream::StrongWeak, Stream::WeakStrong],
    &[Stream::WeakWeak, Stream::StrongWeak, Stream::WeakStrong, Stream::StrongStrong],
];

const GAP_ROWS: [(f64, f64); 4] = [(0.5, 0.5), (0.375, 0.625), (0.25, 0.75), (0.125, 0.875)];

/// Every row of every grid in `spec`, in table order.
pub fn generate_rows(spec: &GridSpec) -> Result<Vec<AblationRow>> {
    let mut base = spec.resolved_base();
    base.validate()?;
    let mut rows = Vec::new();
    for &grid in &spec.grids {
        let splits: Vec<f64> = if grid.per_split() {
            spec.splits.clone()
        } else {
            vec![spec.single_split]
        };
        for &frac in &splits {
            let variants = grid_variants(grid, spec, &base);
            for (axes, mut cfg) in variants {
                cfg.data.labeled_fraction = frac;
                cfg.validate()?;
                let mut axes = axes;
                axes.insert("labeled".into(), format!("{}%", frac * 100.0));
                let full = cfg.loss == base.loss && cfg.perturb == base.perturb;
                rows.push(AblationRow { grid, axes, config: cfg, full });
            }
        }
    }
    Ok(rows)
}

type Variant = (BTreeMap<String, String>, RunConfig);

fn grid_variants(grid: GridKind, spec: &GridSpec, base: &RunConfig) -> Vec<Variant> {
    let with = |f: &dyn Fn(&mut RunConfig), axes: &[(&str, String)]| -> Variant {
        let mut c = base.clone();
        f(&mut c);
        let a = axes.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        (a, c)
    };
    match grid {
        GridKind::Dkd => [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(w, s)| {
                let mut terms = Vec::new();
                if w {
                    terms.push(DkdTerm::W);
                }
                if s {
                    terms.push(DkdTerm::S);
                }
                with(
                    &|c| c.loss.dkd_terms = terms.clone(),
                    &[("dkd_w", mark(w)), ("dkd_s", mark(s))],
                )
            })
            .collect(),
        GridKind::Tkd => TKD_ROWS
            .iter()
            .map(|students| {
                with(
                    &|c| c.loss.tkd_students = students.to_vec(),
                    &[("tkd", subset_name(students, Stream::name))],
                )
            })
            .collect(),
        GridKind::Ip => [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(s1, s2)| {
                let mut ip = Vec::new();
                if s1 {
                    ip.push(IpStream::S1);
                }
                if s2 {
                    ip.push(IpStream::S2);
                }
                with(
                    &|c| c.loss.ip_streams = ip.clone(),
                    &[("ip_s1", mark(s1)), ("ip_s2", mark(s2))],
                )
            })
            .collect(),
        GridKind::HKind => [(HKind::Kl, 1.0), (HKind::Kl, 2.0), (HKind::Ce, 1.0), (HKind::Dice, 1.0)]
            .into_iter()
            .map(|(h, t)| {
                let label = match h {
                    HKind::Kl => format!("KL(T={t})"),
                    HKind::Ce => "CE".to_string(),
                    HKind::Dice => "Dice".to_string(),
                };
                with(
                    &|c| {
                        c.loss.h_kind = h;
                        c.loss.temperature = t;
                    },
                    &[("h", label)],
                )
            })
            .collect(),
        GridKind::Eta => (0..9)
            .map(|i| {
                let eta = (10 + 5 * i) as f64 / 100.0;
                with(&|c| c.loss.eta = eta, &[("eta", format!("{eta:.2}"))])
            })
            .collect(),
        GridKind::Gap => GAP_ROWS
            .iter()
            .map(|&(lo, hi)| {
                with(
                    &|c| {
                        c.perturb.weak_rate = lo;
                        c.perturb.strong_rate = hi;
                    },
                    &[
                        ("bottom", format!("{lo:.3}")),
                        ("top", format!("{hi:.3}")),
                        ("gap", format!("{:.2}", hi - lo)),
                    ],
                )
            })
            .collect(),
        GridKind::Tau => spec
            .taus
            .iter()
            .map(|&tau| with(&|c| c.loss.tau = tau, &[("tau", format!("{tau:.2}"))]))
            .collect(),
        GridKind::DropoutKind => [
            PerturbKind::ChannelDropout,
            PerturbKind::AlphaDropout,
            PerturbKind::FeatureAlphaDropout,
        ]
        .into_iter()
        .map(|k| {
            let name = serde_json::to_value(k)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            with(&|c| c.perturb.kind = k, &[("dropout", name)])
        })
        .collect(),
    }
}

/// A finished row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub metrics: Option<MetricsReport>,
    pub last_loss: Option<LossRow>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub results: Vec<AblationResult>,
}

impl AblationTable {
    /// One markdown section per grid; full-configuration rows are starred.
    pub fn markdown(&self) -> String {
        let mut out = String::new();
        let mut current = None;
        for r in &self.results {
            if current != Some(r.row.grid) {
                current = Some(r.row.grid);
                let _ = writeln!(out, "\n### {}\n", r.row.grid.name());
                out.push_str("| Config | Dice(%) | Jaccard(%) | 95HD | ASD | Full |\n");
                out.push_str("|---|---|---|---|---|---|\n");
            }
            let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
            let (d, j, h, a) = match &r.metrics {
                Some(m) => (format!("{:.2}", m.dice), format!("{:.2}", m.jaccard), fmt(m.hd95), fmt(m.asd)),
                None => ("n/a".into(), "n/a".into(), "n/a".into(), "n/a".into()),
            };
            let _ = writeln!(
                out,
                "| {} | {d} | {j} | {h} | {a} | {} |",
                r.row.label(),
                if r.row.full { "*" } else { "" }
            );
        }
        out.trim_start().to_string()
    }

    pub fn full_rows(&self) -> impl Iterator<Item = &AblationResult> {
        self.results.iter().filter(|r| r.row.full)
    }
}

/// Train and evaluate every row on `records`, with `val` as the held-out set.
/// Rows share the base seed. With `out_dir`, each row gets its own run
/// directory and the table is written as `ablation.md` and `ablation.json`.
pub fn run_ablation(
    spec: &GridSpec,
    records: &[SampleRecord],
    val: Option<&EvalSet>,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    let rows = generate_rows(spec)?;
    let mut table = AblationTable::default();
    for (i, row) in rows.into_iter().enumerate() {
        log::info!("ablation row {i}: {} {}", row.grid.name(), row.label());
        let split = make_split(records, &row.config.split_spec())?;
        let dir = out_dir.map(|d| d.join(format!("row_{i:03}_{}", row.grid.name())));
        let res = fit(
            &row.config,
            &split,
            &FitOptions {
                out_dir: dir.as_deref(),
                val,
                ..Default::default()
            },
        )?;
        table.results.push(AblationResult {
            row,
            metrics: res.final_metrics,
            last_loss: res.log.losses.last().cloned(),
        });
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let md = d.join("ablation.md");
        fs::write(&md, table.markdown()).map_err(|e| Error::io(&md, e))?;
        let js = d.join("ablation.json");
        fs::write(&js, serde_json::to_string_pretty(&table)?).map_err(|e| Error::io(&js, e))?;
    }
    Ok(table)
}

/// `|total − (sup + ip + (1 − η)·tkd + η·dkd)|`.
pub fn decomposition_residual(r: &LossReport, eta: f64) -> f64 {
    (r.total - crate::losses::total_loss(r.sup, r.ip, r.tkd, r.dkd, eta)).abs()
}
