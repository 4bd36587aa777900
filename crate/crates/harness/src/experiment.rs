//! Train every variant per seed, evaluate on a grid of mask conditions, and
//! write per-cell CSVs, a summary, paired t-tests, a report and plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use tsd_core::checkpoint::{self, write_atomic};
use tsd_core::distillation::{train, TrainConfig, Variant};
use tsd_core::masking::{MaskPattern, MaskSpec, ObservationMask};
use tsd_core::metrics::{aggregate, evaluate_one, EvalResult, DEFAULT_K_EVAL};
use tsd_core::model::TsdModel;
use tsd_core::scenario::{generate_scenario, read_jsonl, GeneratorConfig, Scenario};

use crate::report::{self, SummaryRow, TTestRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub generator: GeneratorConfig,
    pub train_count: usize,
    pub eval_count: usize,
    /// JSONL files used instead of generating; a missing file is an error.
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub random_rates: Vec<f64>,
    pub continuous_lengths: Vec<usize>,
    pub eval_seed: u64,
    pub k_eval: usize,
    pub eval_batch: usize,
    /// Template; `variant` and `seed` are set per run.
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            train_count: 2000,
            eval_count: 500,
            train_data: None,
            eval_data: None,
            variants: vec![Variant::Baseline, Variant::TargetOnly, Variant::Tsd],
            seeds: vec![0, 1, 2],
            random_rates: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            continuous_lengths: vec![1, 5, 10, 15, 20],
            eval_seed: 7,
            k_eval: DEFAULT_K_EVAL,
            eval_batch: 64,
            train: TrainConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.variants.is_empty(), "no variants to train");
        ensure!(!self.seeds.is_empty(), "no seeds");
        ensure!(
            !self.random_rates.is_empty() || !self.continuous_lengths.is_empty(),
            "the evaluation grid is empty"
        );
        ensure!(
            self.k_eval >= 1 && self.eval_batch >= 1,
            "k_eval and eval_batch must be >= 1"
        );
        self.generator.validate()?;
        self.train.validate()?;
        let m = self.train.model;
        ensure!(
            m.t_obs == self.generator.t_obs && m.t_pred == self.generator.t_pred,
            "model horizons ({}, {}) differ from the generator's ({}, {})",
            m.t_obs,
            m.t_pred,
            self.generator.t_obs,
            self.generator.t_pred
        );
        for r in &self.random_rates {
            ensure!((0.0..1.0).contains(r), "mask rate {r} outside [0, 1)");
        }
        for l in &self.continuous_lengths {
            ensure!(
                (1..=m.t_obs).contains(l),
                "observed length {l} outside 1..={}",
                m.t_obs
            );
        }
        Ok(())
    }

    /// Random-rate cells followed by continuous-length cells.
    pub fn cells(&self) -> Vec<Cell> {
        self.random_rates
            .iter()
            .map(|&rate| Cell(MaskSpec::Random { rate }))
            .chain(
                self.continuous_lengths
                    .iter()
                    .map(|&observed_len| Cell(MaskSpec::Continuous { observed_len })),
            )
            .collect()
    }
}

/// One evaluation mask condition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell(pub MaskSpec);

impl Cell {
    pub fn name(&self) -> String {
        match self.0 {
            MaskSpec::None => "none".into(),
            MaskSpec::Random { rate } => format!("random_{rate:.2}"),
            MaskSpec::Continuous { observed_len } => format!("continuous_{observed_len:02}"),
        }
    }

    pub fn pattern(&self) -> MaskPattern {
        self.0.pattern()
    }

    /// Parameter as written in CSVs.
    pub fn parameter_label(&self) -> String {
        match self.0 {
            MaskSpec::None => "0".into(),
            MaskSpec::Random { rate } => format!("{rate:.2}"),
            MaskSpec::Continuous { observed_len } => observed_len.to_string(),
        }
    }
}

pub fn pattern_label(p: MaskPattern) -> &'static str {
    match p {
        MaskPattern::None => "none",
        MaskPattern::Random => "random",
        MaskPattern::Continuous => "continuous",
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes.into_iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Mask seed for one scenario in one cell; independent of the variant.
pub fn eval_mask_seed(eval_seed: u64, cell: &Cell, scenario_id: u64) -> u64 {
    let c = fnv1a(cell.name().into_bytes());
    splitmix(splitmix(eval_seed ^ splitmix(c)) ^ scenario_id)
}

pub fn eval_masks(
    cell: &Cell,
    scenarios: &[Scenario],
    eval_seed: u64,
) -> Result<Vec<ObservationMask>> {
    scenarios
        .iter()
        .map(|s| {
            let seed = eval_mask_seed(eval_seed, cell, s.scenario_id);
            Ok(cell.0.build(s.t_obs(), s.neighbors.len(), seed)?)
        })
        .collect()
}

/// Order-sensitive hash of a list of masks.
pub fn mask_hash(masks: &[ObservationMask]) -> u64 {
    fnv1a(masks.iter().flat_map(|m| {
        m.focal
            .iter()
            .chain(m.neighbors.iter().flatten())
            .map(|v| *v as u8)
            .chain([2u8])
    }))
}

/// Forecasts `scenarios` under `masks` in batches and scores them.
pub fn evaluate_model(
    model: &TsdModel,
    use_targets: bool,
    scenarios: &[Scenario],
    masks: &[ObservationMask],
    k_eval: usize,
    batch: usize,
) -> Result<EvalResult> {
    ensure!(
        scenarios.len() == masks.len(),
        "one mask per scenario is required"
    );
    ensure!(!scenarios.is_empty(), "no scenarios to evaluate");
    let mut per = Vec::with_capacity(scenarios.len());
    for (sc, ms) in scenarios.chunks(batch).zip(masks.chunks(batch)) {
        let items: Vec<(&Scenario, &ObservationMask)> = sc.iter().zip(ms).collect();
        let preds = model.predict(&items, use_targets)?;
        for (p, s) in preds.iter().zip(sc) {
            per.push(evaluate_one(&p.forecast, &s.focal_future, k_eval)?);
        }
    }
    Ok(aggregate(per))
}

pub const CELL_CSV_HEADER: &str = "variant,mask_pattern,parameter,min_ade,min_fde,miss_rate,n";

pub fn cell_csv(variant: Variant, cell: &Cell, r: Option<&EvalResult>) -> String {
    let metrics = match r {
        Some(r) => format!(
            "{:.6},{:.6},{:.6},{}",
            r.min_ade, r.min_fde, r.miss_rate, r.n_scenarios
        ),
        None => "nan,nan,nan,0".into(),
    };
    format!(
        "{CELL_CSV_HEADER}\n{},{},{},{metrics}\n",
        variant,
        pattern_label(cell.pattern()),
        cell.parameter_label()
    )
}

/// Training and evaluation datasets, loaded or generated.
pub fn datasets(spec: &ExperimentSpec) -> Result<(Vec<Scenario>, Vec<Scenario>)> {
    let load = |p: &Path| -> Result<Vec<Scenario>> {
        read_jsonl(p).with_context(|| format!("reading dataset {}", p.display()))
    };
    let train = match &spec.train_data {
        Some(p) => load(p)?,
        None => (0..spec.train_count as u64)
            .map(|id| generate_scenario(&spec.generator, id))
            .collect::<tsd_core::Result<_>>()?,
    };
    let eval = match &spec.eval_data {
        Some(p) => load(p)?,
        None => {
            let start = spec.train_count as u64;
            (start..start + spec.eval_count as u64)
                .map(|id| generate_scenario(&spec.generator, id))
                .collect::<tsd_core::Result<_>>()?
        }
    };
    ensure!(
        !train.is_empty() && !eval.is_empty(),
        "datasets must be non-empty"
    );
    Ok((train, eval))
}

pub fn run_dir(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join(variant.name()).join(seed.to_string())
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub rows: Vec<SummaryRow>,
    pub ttests: Vec<TTestRow>,
    pub report: String,
}

/// Runs the whole experiment described by `spec`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let out = &spec.out_dir;
    fs::create_dir_all(out)?;
    let (train_set, eval_set) = datasets(spec)?;
    let cells = spec.cells();

    let mut mask_index = String::from("cell,mask_hash\n");
    let mut hashes = Vec::with_capacity(cells.len());
    for cell in &cells {
        let h = mask_hash(&eval_masks(cell, &eval_set, spec.eval_seed)?);
        let _ = writeln!(mask_index, "{},{h:016x}", cell.name());
        hashes.push(h);
    }
    write_atomic(&out.join("masks.csv"), mask_index.as_bytes())?;

    let mut rows = Vec::new();
    let mut params = String::from("variant,seed,num_params\n");
    for &variant in &spec.variants {
        for &seed in &spec.seeds {
            let dir = run_dir(out, variant, seed);
            fs::create_dir_all(dir.join("eval"))?;
            let cfg = TrainConfig {
                seed,
                variant,
                ..spec.train.clone()
            };
            log::info!("training {variant} seed {seed}");
            let (model, status) = match train(&train_set, &cfg) {
                Ok(trained) => {
                    trained.save(&dir)?;
                    let model = checkpoint::load(&dir.join("ckpt.bin"))?;
                    (Some(model), "ok".to_string())
                }
                Err(e) => {
                    log::warn!("{variant} seed {seed} failed: {e}");
                    let msg = e.to_string().replace([',', '\n'], ";");
                    write_atomic(&dir.join("error.txt"), msg.as_bytes())?;
                    (None, format!("failed: {msg}"))
                }
            };
            if let Some(m) = &model {
                let _ = writeln!(params, "{variant},{seed},{}", m.num_params());
            }
            for (cell, &expected) in cells.iter().zip(&hashes) {
                let masks = eval_masks(cell, &eval_set, spec.eval_seed)?;
                if mask_hash(&masks) != expected {
                    bail!(
                        "evaluation masks for {} changed between variants",
                        cell.name()
                    );
                }
                let result = match &model {
                    Some(m) => Some(evaluate_model(
                        m,
                        variant.uses_targets(),
                        &eval_set,
                        &masks,
                        spec.k_eval,
                        spec.eval_batch,
                    )?),
                    None => None,
                };
                let csv = cell_csv(variant, cell, result.as_ref());
                write_atomic(
                    &dir.join("eval").join(format!("{}.csv", cell.name())),
                    csv.as_bytes(),
                )?;
                rows.push(SummaryRow {
                    variant,
                    seed,
                    pattern: pattern_label(cell.pattern()).to_string(),
                    parameter: cell.parameter_label(),
                    min_ade: result.as_ref().map_or(f64::NAN, |r| r.min_ade),
                    min_fde: result.as_ref().map_or(f64::NAN, |r| r.min_fde),
                    miss_rate: result.as_ref().map_or(f64::NAN, |r| r.miss_rate),
                    n: result.as_ref().map_or(0, |r| r.n_scenarios),
                    status: status.clone(),
                });
            }
        }
    }
    write_atomic(&out.join("params.csv"), params.as_bytes())?;
    write_atomic(
        &out.join("summary.csv"),
        report::summary_csv(&rows).as_bytes(),
    )?;
    let ttests = report::paired_tests(&rows, &spec.seeds);
    write_atomic(
        &out.join("ttests.csv"),
        report::ttests_csv(&ttests).as_bytes(),
    )?;
    let md = report::write_report(out, &rows, &ttests)?;
    Ok(ExperimentOutcome {
        rows,
        ttests,
        report: md,
    })
}
