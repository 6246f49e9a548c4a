//! Accuracy metrics, report tables and classification maps.

mod ppm;


pub use ppm::{read_ppm, render_map, write_map, Rgb};

use std::fmt::Write as _;

use crate::autodiff::{NormMode, Tape};
use crate::data::{patch_batch, HsiCube, GroundTruth, Sample, SampleSplit};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::model::{forward_with, predict, ModelParams};

/// Counts indexed `[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_counts(n: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n * n {
            return Err(Error::InvalidArgument(format!(
                "{n}×{n} confusion matrix needs {} counts, got {}",
                n * n,
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { n, counts })
    }

    pub fn classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        for l in [truth, pred] {
            if l >= self.n {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: self.n,
                });
            }
        }
        self.counts[truth * self.n + pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.n..(i + 1) * self.n].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.n).map(|i| self.get(i, j)).sum()
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], n: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(n);
    for (&t, &p) in truth.iter().zip(pred) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Recall of each class; `None` when the class has no evaluated pixels.
    pub per_class: Vec<Option<f64>>,
    /// Evaluated pixels per true class.
    pub support: Vec<u64>,
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("confusion matrix is empty".into()));
    }
    let n = cm.classes();
    let tot = total as f64;
    let oa = cm.trace() as f64 / tot;
    let support: Vec<u64> = (0..n).map(|i| cm.row_sum(i)).collect();
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|i| (support[i] > 0).then(|| cm.get(i, i) as f64 / support[i] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let aa = present.iter().sum::<f64>() / present.len() as f64;
    let pe = (0..n)
        .map(|i| support[i] as f64 * cm.col_sum(i) as f64)
        .sum::<f64>()
        / (tot * tot);
    let kappa = if pe == 1.0 {
        if oa == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (oa - pe) / (1.0 - pe)
    };
    Ok(MetricsReport {
        oa,
        aa,
        kappa,
        per_class,
        support,
    })
}

impl MetricsReport {
    /// Aligned table: one row per class, then OA(%), AA(%) and k×100.
    pub fn table(&self, class_names: &[String]) -> String {
        let width = class_names
            .iter()
            .map(|c| c.chars().count())
            .chain([5])
            .max()
            .unwrap_or(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:>3}  {:<width$}  {:>8}  {:>8}", "No.", "Class", "Test", "Acc(%)");
        for (i, acc) in self.per_class.iter().enumerate() {
            let name = class_names.get(i).map(String::as_str).unwrap_or("?");
            let acc = acc.map_or_else(|| "-".to_string(), |a| format!("{:.2}", 100.0 * a));
            let _ = writeln!(s, "{:>3}  {:<width$}  {:>8}  {:>8}", i + 1, name, self.support[i], acc);
        }
        let pad = width + 15;
        let _ = writeln!(s, "{:<pad$}  {:>8.2}", "OA(%)", 100.0 * self.oa);
        let _ = writeln!(s, "{:<pad$}  {:>8.2}", "AA(%)", 100.0 * self.aa);
        let _ = writeln!(s, "{:<pad$}  {:>8.2}", "k×100", 100.0 * self.kappa);
        s
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new("metrics");
        kv.set("oa", self.oa);
        kv.set("aa", self.aa);
        kv.set("kappa", self.kappa);
        for (i, (acc, n)) in self.per_class.iter().zip(&self.support).enumerate() {
            kv.set(&format!("class.{}.test", i + 1), n);
            if let Some(a) = acc {
                kv.set(&format!("class.{}.accuracy", i + 1), a);
            }
        }
        kv
    }
}

/// Eval-mode class predictions (0-based) for `samples`, `batch` at a time.
pub fn predict_samples(
    params: &ModelParams,
    cube: &HsiCube,
    samples: &[Sample],
    batch: usize,
) -> Result<Vec<usize>> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let cfg = params.config();
    let mut buffers = params.buffers().clone();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch) {
        let mut tape = Tape::new();
        let vars = params.bind_constants(&mut tape);
        let x = tape.constant(patch_batch(cube, chunk, cfg.patch_size)?);
        let logits = forward_with(&mut tape, cfg, &vars, &mut buffers, x, NormMode::Eval)?;
        out.extend(predict(&tape, &logits)?);
    }
    Ok(out)
}

/// Metrics over the test pixels of `split`, and a raster (0 = unlabeled,
/// `k` = class k) holding predictions at every labeled pixel.
pub fn evaluate(
    params: &ModelParams,
    cube: &HsiCube,
    gt: &GroundTruth,
    split: &SampleSplit,
    batch: usize,
) -> Result<(MetricsReport, Vec<u16>)> {
    if gt.num_classes() != params.config().classes {
        return Err(Error::InvalidArgument(format!(
            "model predicts {} classes, ground truth has {}",
            params.config().classes,
            gt.num_classes()
        )));
    }
    let labeled = gt.labeled();
    let pred = predict_samples(params, cube, &labeled, batch)?;
    let mut raster = vec![0u16; gt.height() * gt.width()];
    for (s, &p) in labeled.iter().zip(&pred) {
        raster[s.row * gt.width() + s.col] = p as u16 + 1;
    }
    let test = split.test_samples();
    let truth: Vec<usize> = test.iter().map(|s| s.label).collect();
    let guess: Vec<usize> = test
        .iter()
        .map(|s| raster[s.row * gt.width() + s.col] as usize - 1)
        .collect();
    let report = metrics(&confusion(&truth, &guess, gt.num_classes())?)?;
    Ok((report, raster))
}
