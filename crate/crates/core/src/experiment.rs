//! Paired reversal experiments and hyperparameter sweeps.
//!
//! Every model in an experiment starts from the same initialization. The
//! baseline trains with next-token prediction only; each comparison point
//! mixes in the denoising objective with its own settings.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{generate_bundle, DatasetBundle, TaskKind, PAD};
use crate::error::{Error, Result};
use crate::model::{checkpoint_checksum, TransformerModel};
use crate::numeric::{Precision, Real, RngStream};
use crate::train::{evaluate_em, streams, train, EvalReport, StepRecord, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub p_ntp: f64,
    pub p_mask: f64,
    pub span: usize,
}

impl SweepPoint {
    pub fn of(config: &TrainConfig) -> Self {
        SweepPoint {
            p_ntp: config.p_ntp,
            p_mask: config.p_mask,
            span: config.span,
        }
    }

    pub fn apply(&self, config: &TrainConfig) -> TrainConfig {
        TrainConfig {
            p_ntp: self.p_ntp,
            p_mask: self.p_mask,
            span: self.span,
            ..config.clone()
        }
    }

    /// With `p_ntp = 1` masking settings are never consulted.
    pub fn is_pure_ntp(&self) -> bool {
        self.p_ntp >= 1.0
    }

    pub fn label(&self) -> String {
        format!("p_ntp={} p_mask={} span={}", self.p_ntp, self.p_mask, self.span)
    }
}

/// Cartesian product of the sweep lists, falling back to the base value for
/// empty lists.
pub fn sweep_points(config: &RunConfig) -> Vec<SweepPoint> {
    let base = SweepPoint::of(&config.train);
    let or_base = |v: &Vec<f64>, b: f64| if v.is_empty() { vec![b] } else { v.clone() };
    let spans = if config.sweep.span.is_empty() {
        vec![base.span]
    } else {
        config.sweep.span.clone()
    };
    let mut out = Vec::new();
    for &p_ntp in &or_base(&config.sweep.p_ntp, base.p_ntp) {
        for &p_mask in &or_base(&config.sweep.p_mask, base.p_mask) {
            for &span in &spans {
                out.push(SweepPoint { p_ntp, p_mask, span });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub label: String,
    pub point: SweepPoint,
    pub paraphrase: EvalReport,
    pub reverse: EvalReport,
    pub checksum: String,
    pub steps: usize,
    pub final_loss: f64,
    /// Per-step training records.
    pub metrics: Vec<StepRecord>,
}

impl ModelReport {
    pub fn forward_em(&self) -> f64 {
        self.paraphrase.exact_match_rate
    }

    pub fn reverse_em(&self) -> f64 {
        self.reverse.exact_match_rate
    }
}

/// A trained model together with its report.
pub struct TrainedModel<F: Real> {
    pub model: TransformerModel<F>,
    pub report: ModelReport,
}

pub fn init_model<F: Real>(config: &RunConfig, bundle: &DatasetBundle) -> Result<TransformerModel<F>> {
    let model_config = config.model.model_config(bundle.vocab.len());
    if bundle.max_sequence_len() > model_config.max_positions {
        return Err(Error::InvalidConfig(format!(
            "max_positions {} is shorter than the longest sequence ({})",
            model_config.max_positions,
            bundle.max_sequence_len()
        )));
    }
    TransformerModel::init(&model_config, &mut RngStream::substream(config.seed, streams::INIT))
}

/// Trains a copy of `init` at `point` and evaluates it on both test splits.
pub fn train_and_evaluate<F: Real>(
    label: &str,
    init: &TransformerModel<F>,
    bundle: &DatasetBundle,
    train_config: &TrainConfig,
    point: SweepPoint,
) -> Result<TrainedModel<F>> {
    let mut model = init.clone();
    let cfg = point.apply(train_config);
    let metrics = train(&mut model, &bundle.train, &cfg, PAD, |_| {})?;
    let paraphrase = evaluate_em(&model, &bundle.paraphrase_test)?;
    let reverse = evaluate_em(&model, &bundle.reverse_test)?;
    let report = ModelReport {
        label: label.to_string(),
        point,
        paraphrase,
        reverse,
        checksum: checkpoint_checksum(&model),
        steps: metrics.len(),
        final_loss: metrics.last().map_or(f64::NAN, |r| r.loss),
        metrics,
    };
    Ok(TrainedModel { model, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub seed: u64,
    pub task: TaskKind,
    pub baseline: ModelReport,
    pub bico: ModelReport,
}

impl PairedReport {
    /// Two models by two tasks by two metrics.
    pub fn headline(&self) -> Vec<(String, f64)> {
        let mut out = Vec::with_capacity(8);
        for m in [&self.baseline, &self.bico] {
            for (task, r) in [("paraphrase", &m.paraphrase), ("reverse", &m.reverse)] {
                out.push((format!("{} {task} exact_match", m.label), r.exact_match_rate));
                out.push((format!("{} {task} likelihood", m.label), r.mean_likelihood));
            }
        }
        out
    }

    pub fn table(&self) -> String {
        let mut s = format!("task={} seed={}\n", self.task, self.seed);
        s += &summary_table(&[&self.baseline, &self.bico]);
        s
    }
}

/// Fixed-width table of exact match and likelihood for several models.
pub fn summary_table(models: &[&ModelReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>6} {:>7} {:>5} | {:>8} {:>8} | {:>8} {:>8}",
        "model", "p_ntp", "p_mask", "span", "fwd_em", "fwd_lik", "rev_em", "rev_lik"
    );
    for m in models {
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>7} {:>5} | {:>8.3} {:>8.4} | {:>8.3} {:>8.4}",
            m.label,
            m.point.p_ntp,
            m.point.p_mask,
            m.point.span,
            m.paraphrase.exact_match_rate,
            m.paraphrase.mean_likelihood,
            m.reverse.exact_match_rate,
            m.reverse.mean_likelihood
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub task: TaskKind,
    pub baseline: ModelReport,
    pub points: Vec<ModelReport>,
}

impl SweepReport {
    pub fn paired(&self) -> Vec<PairedReport> {
        self.points
            .iter()
            .map(|p| PairedReport {
                seed: self.seed,
                task: self.task,
                baseline: self.baseline.clone(),
                bico: p.clone(),
            })
            .collect()
    }

    pub fn find(&self, point: SweepPoint) -> Option<&ModelReport> {
        self.points.iter().find(|r| r.point == point)
    }

    pub fn table(&self) -> String {
        let mut rows: Vec<&ModelReport> = vec![&self.baseline];
        rows.extend(&self.points);
        format!("task={} seed={}\n{}", self.task, self.seed, summary_table(&rows))
    }
}

/// Everything one sweep produced, models included.
pub struct SweepOutcome<F: Real> {
    pub bundle: DatasetBundle,
    pub baseline: TrainedModel<F>,
    pub points: Vec<TrainedModel<F>>,
}

impl<F: Real> SweepOutcome<F> {
    pub fn report(&self, seed: u64) -> SweepReport {
        SweepReport {
            seed,
            task: self.bundle.task,
            baseline: self.baseline.report.clone(),
            points: self.points.iter().map(|p| p.report.clone()).collect(),
        }
    }
}

fn clone_trained<F: Real>(t: &TrainedModel<F>, label: &str, point: SweepPoint) -> TrainedModel<F> {
    let mut report = t.report.clone();
    report.label = label.to_string();
    report.point = point;
    TrainedModel {
        model: t.model.clone(),
        report,
    }
}

/// Trains the baseline and one model per point, all from one
/// initialization. Points with `p_ntp = 1` reuse the baseline. Up to `jobs`
/// points train concurrently.
pub fn run_points<F: Real>(config: &RunConfig, points: &[SweepPoint], jobs: usize) -> Result<SweepOutcome<F>> {
    config.validate()?;
    let bundle = generate_bundle(&config.data, config.seed)?;
    let init = init_model::<F>(config, &bundle)?;
    let train_config = config.train_config();
    let ntp_point = SweepPoint {
        p_ntp: 1.0,
        ..SweepPoint::of(&train_config)
    };

    let todo: Vec<(usize, SweepPoint)> = points
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, p)| !p.is_pure_ntp())
        .collect();
    // Slot 0 is the baseline; slot i + 1 is point i.
    let slots: Vec<Mutex<Option<Result<TrainedModel<F>>>>> =
        (0..=points.len()).map(|_| Mutex::new(None)).collect();
    let mut queue: Vec<(usize, String, SweepPoint)> = vec![(0, "ntp".to_string(), ntp_point)];
    queue.extend(todo.iter().map(|&(i, p)| (i + 1, format!("bico#{i}"), p)));
    let next = AtomicUsize::new(0);
    let workers = jobs.clamp(1, queue.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some((slot, label, point)) = queue.get(k) else {
                    break;
                };
                let result = train_and_evaluate(label, &init, &bundle, &train_config, *point);
                *slots[*slot].lock().unwrap() = Some(result);
            });
        }
    });

    let mut results: Vec<Option<Result<TrainedModel<F>>>> =
        slots.into_iter().map(|m| m.into_inner().unwrap()).collect();
    let baseline = results[0].take().expect("baseline trained")?;
    let mut trained = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let label = format!("bico#{i}");
        trained.push(if p.is_pure_ntp() {
            clone_trained(&baseline, &label, *p)
        } else {
            results[i + 1].take().expect("point trained")?
        });
    }
    Ok(SweepOutcome {
        bundle,
        baseline,
        points: trained,
    })
}

/// Baseline against the configured mixture, from one initialization.
pub fn run_reversal_experiment<F: Real>(config: &RunConfig, jobs: usize) -> Result<(SweepOutcome<F>, PairedReport)> {
    let point = SweepPoint::of(&config.train);
    let mut outcome = run_points::<F>(config, &[point], jobs)?;
    outcome.points[0].report.label = "bico".to_string();
    let report = PairedReport {
        seed: config.seed,
        task: outcome.bundle.task,
        baseline: outcome.baseline.report.clone(),
        bico: outcome.points[0].report.clone(),
    };
    Ok((outcome, report))
}

/// Precision-dispatched sweep that returns reports only.
pub fn run_sweep_report(config: &RunConfig, points: &[SweepPoint], jobs: usize) -> Result<SweepReport> {
    match config.precision {
        Precision::F32 => run_points::<f32>(config, points, jobs).map(|o| o.report(config.seed)),
        Precision::F64 => run_points::<f64>(config, points, jobs).map(|o| o.report(config.seed)),
    }
}
