//! Open-world generalized evaluation.
//!
//! A calibration bias `b` is added to every unseen-composition score before
//! the argmax. Sweeping `b` from `-inf` to `+inf` trades seen accuracy for
//! unseen accuracy; the report keeps the best of each, the best harmonic
//! mean along the sweep, and the area under the unseen-vs-seen curve.
//!
//! Only the two largest feasible scores of a sample matter: the best seen
//! cell and the best unseen cell. The prediction switches from the former to
//! the latter once `u + b` overtakes `s`, so the per-sample margins `s - u`
//! are exactly the biases where accuracies can change.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::classifiers::{ClassifierKind, ClassifierModel};
use crate::composition::{apply_mask, compose, compose_with_exponent, CompositionScoreMatrix, WeightExponent};
use crate::data::{Composition, CompositionSet, Dataset, Split};
use crate::error::{Error, Result};
use crate::feasibility::FeasibilityMask;
use crate::training::PrimitiveAccuracy;

pub const DEFAULT_BIAS_POINTS: usize = 200;

/// `2su / (s + u)`, zero when both are zero.
pub fn harmonic_mean(s: f64, u: f64) -> Result<f64> {
    if !((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&u)) {
        return Err(Error::input(format!("accuracies ({s}, {u}) outside [0, 1]")));
    }
    Ok(if s + u == 0.0 { 0.0 } else { 2.0 * s * u / (s + u) })
}

/// Trapezoidal area under unseen accuracy as a function of seen accuracy.
///
/// Points are sorted by seen accuracy; `(0, max unseen)` is prepended so the
/// area starts at the vertical axis, and the curve ends at the largest seen
/// accuracy.
pub fn auc_from_curve(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::input("auc needs at least two curve points"));
    }
    if points
        .iter()
        .any(|&(s, u)| !((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&u)))
    {
        return Err(Error::input("curve points must lie in [0, 1]^2"));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let max_unseen = sorted.iter().map(|p| p.1).fold(0.0, f64::max);
    let mut area = 0.0;
    let mut prev = (0.0, max_unseen);
    for &p in &sorted {
        area += (p.0 - prev.0) * (p.1 + prev.1) / 2.0;
        prev = p;
    }
    Ok(area)
}

/// How to choose the biases of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum BiasGrid {
    /// Both sentinels plus the per-sample margins, subsampled to at most
    /// this many values (at least 2).
    Sweep(usize),
    /// Exactly these biases.
    Fixed(Vec<f64>),
}

impl Default for BiasGrid {
    fn default() -> Self {
        BiasGrid::Sweep(DEFAULT_BIAS_POINTS)
    }
}

/// One test sample reduced to its best feasible seen and unseen cells.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Contenders {
    /// `(score, flat index)` of the best feasible seen cell.
    seen: Option<(f64, usize)>,
    unseen: Option<(f64, usize)>,
}

impl Contenders {
    fn of(scores: &CompositionScoreMatrix, seen: &CompositionSet) -> Self {
        let mut best_seen: Option<(f64, usize)> = None;
        let mut best_unseen: Option<(f64, usize)> = None;
        for (i, &v) in scores.scores().iter().enumerate() {
            if v == f64::NEG_INFINITY {
                continue;
            }
            let c = Composition::new(i / scores.n_objects(), i % scores.n_objects());
            let slot = if seen.contains(&c) { &mut best_seen } else { &mut best_unseen };
            if slot.is_none_or(|(b, _)| v > b) {
                *slot = Some((v, i));
            }
        }
        Self {
            seen: best_seen,
            unseen: best_unseen,
        }
    }

    /// Flat index predicted at `bias`. The unseen contender wins once
    /// `bias >= s - u`, so a grid point placed exactly on a margin already
    /// counts the flip there.
    fn predict(&self, bias: f64) -> Option<usize> {
        match (self.seen, self.unseen) {
            (None, None) => None,
            (Some((_, i)), None) | (None, Some((_, i))) => Some(i),
            (Some((s, si)), Some((u, ui))) => Some(if bias >= s - u { ui } else { si }),
        }
    }

    fn margin(&self) -> Option<f64> {
        Some(self.seen?.0 - self.unseen?.0)
    }
}

/// `{-inf} ∪ sorted unique margins ∪ {+inf}`, subsampled at evenly spaced
/// quantiles of the margins when longer than `max_points`.
pub fn bias_grid(margins: &[f64], max_points: usize) -> Result<Vec<f64>> {
    if max_points < 2 {
        return Err(Error::input("bias grid needs room for both sentinels"));
    }
    let mut inner: Vec<f64> = margins.iter().copied().filter(|m| m.is_finite()).collect();
    inner.sort_by(f64::total_cmp);
    inner.dedup();
    let budget = max_points - 2;
    if inner.len() > budget {
        inner = match budget {
            0 => Vec::new(),
            1 => vec![inner[(inner.len() - 1) / 2]],
            _ => (0..budget)
                .map(|k| {
                    let pos = k as f64 * (inner.len() - 1) as f64 / (budget - 1) as f64;
                    inner[pos.round() as usize]
                })
                .collect(),
        };
        inner.dedup();
    }
    let mut grid = Vec::with_capacity(inner.len() + 2);
    grid.push(f64::NEG_INFINITY);
    grid.extend(inner);
    grid.push(f64::INFINITY);
    Ok(grid)
}

fn serialize_bias<S: Serializer>(b: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if *b == f64::INFINITY {
        s.serialize_str("inf")
    } else if *b == f64::NEG_INFINITY {
        s.serialize_str("-inf")
    } else {
        s.serialize_f64(*b)
    }
}

fn deserialize_bias<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Raw::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
        Raw::Text(t) => Err(serde::de::Error::custom(format!("bad bias {t:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasCurvePoint {
    /// Infinite sentinels are written as the strings `"-inf"` and `"inf"`.
    #[serde(serialize_with = "serialize_bias", deserialize_with = "deserialize_bias")]
    pub bias: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
}

/// Sweep results that depend only on composition scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub best_seen: f64,
    pub best_unseen: f64,
    pub best_hm: f64,
    pub auc: f64,
    pub curve: Vec<BiasCurvePoint>,
    pub seen_samples: usize,
    pub unseen_samples: usize,
}

/// Run the bias sweep over already masked score matrices.
///
/// A sample counts as seen when its label is in `seen`. Both kinds must be
/// present. The monotone shape of the curve is checked before returning.
pub fn evaluate_scores(
    samples: &[(CompositionScoreMatrix, Composition)],
    seen: &CompositionSet,
    grid: &BiasGrid,
) -> Result<SweepResult> {
    let contenders: Vec<(Contenders, usize, bool)> = samples
        .iter()
        .map(|(scores, label)| {
            (
                Contenders::of(scores, seen),
                label.state * scores.n_objects() + label.object,
                seen.contains(label),
            )
        })
        .collect();
    if contenders.iter().any(|(c, _, _)| c.seen.is_none() && c.unseen.is_none()) {
        return Err(Error::Prediction("a test sample has no feasible composition".into()));
    }
    let n_seen = contenders.iter().filter(|c| c.2).count();
    let n_unseen = contenders.len() - n_seen;
    if n_seen == 0 || n_unseen == 0 {
        return Err(Error::input(format!(
            "evaluation needs seen and unseen test samples ({n_seen} seen, {n_unseen} unseen)"
        )));
    }
    let biases = match grid {
        BiasGrid::Sweep(points) => {
            let margins: Vec<f64> = contenders.iter().filter_map(|c| c.0.margin()).collect();
            bias_grid(&margins, *points)?
        }
        BiasGrid::Fixed(b) => {
            if b.is_empty() || b.iter().any(|x| x.is_nan()) {
                return Err(Error::input("fixed bias grid must be non-empty and free of NaN"));
            }
            let mut b = b.clone();
            b.sort_by(f64::total_cmp);
            b
        }
    };

    let mut curve = Vec::with_capacity(biases.len());
    for &bias in &biases {
        let (mut hit_seen, mut hit_unseen) = (0usize, 0usize);
        for (c, truth, is_seen) in &contenders {
            if c.predict(bias) == Some(*truth) {
                if *is_seen {
                    hit_seen += 1;
                } else {
                    hit_unseen += 1;
                }
            }
        }
        curve.push(BiasCurvePoint {
            bias,
            seen_acc: hit_seen as f64 / n_seen as f64,
            unseen_acc: hit_unseen as f64 / n_unseen as f64,
        });
    }
    check_monotone(&curve)?;

    let best_seen = curve.iter().map(|p| p.seen_acc).fold(0.0, f64::max);
    let best_unseen = curve.iter().map(|p| p.unseen_acc).fold(0.0, f64::max);
    let mut best_hm: f64 = 0.0;
    for p in &curve {
        best_hm = best_hm.max(harmonic_mean(p.seen_acc, p.unseen_acc)?);
    }
    let auc = if curve.len() >= 2 {
        let pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.seen_acc, p.unseen_acc)).collect();
        auc_from_curve(&pts)?
    } else {
        0.0
    };
    Ok(SweepResult {
        best_seen,
        best_unseen,
        best_hm,
        auc,
        curve,
        seen_samples: n_seen,
        unseen_samples: n_unseen,
    })
}

/// Seen accuracy must not rise and unseen accuracy must not fall as the
/// bias grows.
pub fn check_monotone(curve: &[BiasCurvePoint]) -> Result<()> {
    for w in curve.windows(2) {
        if w[1].seen_acc > w[0].seen_acc || w[1].unseen_acc < w[0].unseen_acc {
            return Err(Error::numeric(format!(
                "bias sweep not monotone between {} and {}",
                w[0].bias, w[1].bias
            )));
        }
    }
    Ok(())
}

/// The four ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "kg-sp")]
    KgSp,
    #[serde(rename = "kg-sa")]
    KgSa,
    #[serde(rename = "kg-sow")]
    KgSow,
    #[serde(rename = "sasow")]
    Sasow,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::KgSp, Variant::KgSa, Variant::KgSow, Variant::Sasow];

    pub fn from_parts(kind: ClassifierKind, weighted: bool) -> Self {
        match (kind, weighted) {
            (ClassifierKind::Mlp, false) => Variant::KgSp,
            (ClassifierKind::Attention, false) => Variant::KgSa,
            (ClassifierKind::Mlp, true) => Variant::KgSow,
            (ClassifierKind::Attention, true) => Variant::Sasow,
        }
    }

    pub fn kind(self) -> ClassifierKind {
        match self {
            Variant::KgSp | Variant::KgSow => ClassifierKind::Mlp,
            Variant::KgSa | Variant::Sasow => ClassifierKind::Attention,
        }
    }

    pub fn weighted(self) -> bool {
        matches!(self, Variant::KgSow | Variant::Sasow)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::KgSp => "kg-sp",
            Variant::KgSa => "kg-sa",
            Variant::KgSow => "kg-sow",
            Variant::Sasow => "sasow",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::KgSp => "KG-SP",
            Variant::KgSa => "KG-SA",
            Variant::KgSow => "KG-SOW",
            Variant::Sasow => "SASOW",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown variant {s:?}")))
    }
}

/// Field order is the JSON key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub best_seen: f64,
    pub best_unseen: f64,
    pub best_hm: f64,
    pub auc: f64,
    pub state_acc: f64,
    pub object_acc: f64,
    /// Exponent applied to state probabilities; 1 for unweighted variants.
    pub alpha: f64,
    pub seen_samples: usize,
    pub unseen_samples: usize,
    pub feasible_cells: usize,
    pub curve: Vec<BiasCurvePoint>,
}

/// Score every test sample of `ds` and run the sweep.
///
/// The models must be of the variant's classifier kind and must predict the
/// dataset vocabulary. Weighted variants raise state probabilities to
/// `a_sta / a_obj` before masking.
pub fn evaluate_open_world(
    cl_sta: &ClassifierModel,
    cl_obj: &ClassifierModel,
    acc: &PrimitiveAccuracy,
    ds: &Dataset,
    mask: &FeasibilityMask,
    variant: Variant,
    grid: &BiasGrid,
) -> Result<EvalReport> {
    for (role, model, names) in [
        ("state", cl_sta, &ds.vocab.states),
        ("object", cl_obj, &ds.vocab.objects),
    ] {
        if model.kind() != variant.kind() {
            return Err(Error::input(format!(
                "variant {variant} needs {} classifiers, {role} model is {}",
                variant.kind(),
                model.kind()
            )));
        }
        if &model.class_names != names {
            return Err(Error::input(format!("{role} model classes differ from the dataset vocabulary")));
        }
        if model.feature_dim() != ds.dim {
            return Err(Error::input(format!(
                "{role} model expects {} features, dataset has {}",
                model.feature_dim(),
                ds.dim
            )));
        }
    }
    let alpha = if variant.weighted() {
        WeightExponent::from_accuracies(acc.a_sta, acc.a_obj)?
    } else {
        WeightExponent::ONE
    };

    let test: Vec<_> = ds.samples_in(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::input("dataset has no test samples"));
    }
    let x = ds.feature_matrix(test.iter().copied())?;
    let p_sta = cl_sta.predict_probs_batch(&x)?;
    let p_obj = cl_obj.predict_probs_batch(&x)?;

    let mut scored = Vec::with_capacity(test.len());
    let (mut state_hits, mut object_hits) = (0usize, 0usize);
    for ((s, ps), po) in test.iter().zip(&p_sta).zip(&p_obj) {
        state_hits += usize::from(ps.argmax() == s.state);
        object_hits += usize::from(po.argmax() == s.object);
        let raw = if variant.weighted() {
            compose_with_exponent(ps, po, alpha)?
        } else {
            compose(ps, po)?
        };
        scored.push((apply_mask(&raw, mask)?, s.composition()));
    }
    let sweep = evaluate_scores(&scored, &ds.split.seen, grid)?;
    let n = test.len() as f64;
    Ok(EvalReport {
        variant,
        best_seen: sweep.best_seen,
        best_unseen: sweep.best_unseen,
        best_hm: sweep.best_hm,
        auc: sweep.auc,
        state_acc: state_hits as f64 / n,
        object_acc: object_hits as f64 / n,
        alpha: alpha.value(),
        seen_samples: sweep.seen_samples,
        unseen_samples: sweep.unseen_samples,
        feasible_cells: mask.count(),
        curve: sweep.curve,
    })
}

pub fn save_report(report: &EvalReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// `bias,seen_acc,unseen_acc,hm` per grid point.
pub fn write_curve_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut out = String::from("bias,seen_acc,unseen_acc,hm\n");
    for p in &report.curve {
        let hm = harmonic_mean(p.seen_acc, p.unseen_acc)?;
        writeln!(out, "{},{},{},{}", p.bias, p.seen_acc, p.unseen_acc, hm).expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Plain-text table, one row per report, metrics in percent.
pub fn format_comparison(reports: &[EvalReport]) -> String {
    let mut out = format!(
        "{:<8} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
        "Variant", "S", "U", "HM", "AUC", "Sta.", "Obj."
    );
    for r in reports {
        writeln!(
            out,
            "{:<8} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2}",
            r.variant.label(),
            100.0 * r.best_seen,
            100.0 * r.best_unseen,
            100.0 * r.best_hm,
            100.0 * r.auc,
            100.0 * r.state_acc,
            100.0 * r.object_acc
        )
        .expect("string write");
    }
    out
}
