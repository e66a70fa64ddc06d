//! The shipped tiny fixture evaluated by the binary must reproduce the
//! committed golden reports, and the golden reports must equal an
//! exhaustive recomputation that shares no code with the sweep.

#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::BTreeSet;
use std::path::Path;

use common::{fixture, ok, p, run};
use sasow_core::data::{load_dataset, Composition, Split};
use sasow_core::evaluation::{load_report, save_report, BiasCurvePoint, EvalReport, Variant};
use sasow_core::feasibility::load_mask;
use sasow_core::training::load_trained;

const VARIANTS: [Variant; 2] = [Variant::KgSp, Variant::KgSow];

fn golden_path(v: Variant) -> std::path::PathBuf {
    fixture().join(format!("golden-{v}.json"))
}

/// Cell `a` (seen) against cell `c` (unseen) at `bias`: the unseen cell wins
/// once the bias covers the score gap.
fn beats(cells: &[(f64, bool)], i: usize, j: usize, bias: f64) -> bool {
    let ((si, ui), (sj, uj)) = (cells[i], cells[j]);
    match (ui, uj) {
        (false, true) => bias < si - sj,
        (true, false) => bias >= sj - si,
        // Same kind: higher score, then lower index.
        _ => si > sj || (si == sj && i < j),
    }
}

/// The cell that beats every other feasible cell.
fn tournament(cells: &[(f64, bool)], bias: f64) -> usize {
    let live: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].0 != f64::NEG_INFINITY).collect();
    let winners: Vec<usize> = live
        .iter()
        .copied()
        .filter(|&i| live.iter().all(|&j| i == j || beats(cells, i, j, bias)))
        .collect();
    assert_eq!(winners.len(), 1, "comparison is a strict total order");
    winners[0]
}

fn oracle_report(dir: &Path, variant: Variant) -> EvalReport {
    let ds = load_dataset(&dir.join("data")).unwrap();
    let pair = load_trained(&dir.join("model/mlp")).unwrap();
    let mask = load_mask(&dir.join("mask.csv"), &ds.vocab).unwrap();
    let (ns, no) = (ds.vocab.n_states(), ds.vocab.n_objects());
    let alpha = if variant.weighted() { pair.summary.a_sta / pair.summary.a_obj } else { 1.0 };
    let seen: &BTreeSet<Composition> = &ds.split.seen;

    let mut samples = Vec::new();
    let (mut hit_s, mut hit_o) = (0, 0);
    for s in ds.samples_in(Split::Test) {
        let ps = pair.state_model.predict_probs(&s.features).unwrap();
        let po = pair.object_model.predict_probs(&s.features).unwrap();
        let (ps, po) = (ps.as_slice(), po.as_slice());
        let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
        hit_s += usize::from(argmax(ps) == s.state);
        hit_o += usize::from(argmax(po) == s.object);
        let mut cells = Vec::new();
        for i in 0..ns {
            for j in 0..no {
                let v = if mask.is_feasible(i, j) {
                    let w = if alpha == 1.0 { ps[i] } else { ps[i].powf(alpha) };
                    w * po[j]
                } else {
                    f64::NEG_INFINITY
                };
                cells.push((v, !seen.contains(&Composition::new(i, j))));
            }
        }
        samples.push((cells, s.state * no + s.object, seen.contains(&s.composition())));
    }

    // Every finite gap between a best seen and a best unseen cell.
    let mut grid = vec![f64::NEG_INFINITY, f64::INFINITY];
    for (cells, _, _) in &samples {
        let best = |unseen: bool| {
            cells.iter().filter(|c| c.1 == unseen).map(|c| c.0).fold(f64::NEG_INFINITY, f64::max)
        };
        let (s, u) = (best(false), best(true));
        if s.is_finite() && u.is_finite() {
            grid.push(s - u);
        }
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    assert!(grid.len() <= 200, "fixture grid needs no subsampling");

    let n_seen = samples.iter().filter(|s| s.2).count();
    let n_unseen = samples.len() - n_seen;
    let curve: Vec<BiasCurvePoint> = grid
        .iter()
        .map(|&b| {
            let (mut hs, mut hu) = (0, 0);
            for (cells, truth, is_seen) in &samples {
                let hit = tournament(cells, b) == *truth;
                if *is_seen {
                    hs += usize::from(hit);
                } else {
                    hu += usize::from(hit);
                }
            }
            BiasCurvePoint { bias: b, seen_acc: hs as f64 / n_seen as f64, unseen_acc: hu as f64 / n_unseen as f64 }
        })
        .collect();

    let hm = |s: f64, u: f64| if s + u == 0.0 { 0.0 } else { 2.0 * s * u / (s + u) };
    let best_unseen = curve.iter().map(|c| c.unseen_acc).fold(0.0, f64::max);
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|c| (c.seen_acc, c.unseen_acc)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut auc = 0.0;
    let mut prev = (0.0, best_unseen);
    for q in pts {
        auc += (q.0 - prev.0) * (q.1 + prev.1) / 2.0;
        prev = q;
    }
    let n = samples.len() as f64;
    EvalReport {
        variant,
        best_seen: curve.iter().map(|c| c.seen_acc).fold(0.0, f64::max),
        best_unseen,
        best_hm: curve.iter().map(|c| hm(c.seen_acc, c.unseen_acc)).fold(0.0, f64::max),
        auc,
        state_acc: hit_s as f64 / n,
        object_acc: hit_o as f64 / n,
        alpha,
        seen_samples: n_seen,
        unseen_samples: n_unseen,
        feasible_cells: mask.count(),
        curve,
    }
}

fn assert_close(a: &EvalReport, b: &EvalReport) {
    let close = |x: f64, y: f64| x == y || (x - y).abs() <= 1e-12;
    assert_eq!(a.variant, b.variant);
    for (x, y) in [
        (a.best_seen, b.best_seen),
        (a.best_unseen, b.best_unseen),
        (a.best_hm, b.best_hm),
        (a.auc, b.auc),
        (a.state_acc, b.state_acc),
        (a.object_acc, b.object_acc),
        (a.alpha, b.alpha),
    ] {
        assert!(close(x, y), "{x} vs {y}");
    }
    assert_eq!((a.seen_samples, a.unseen_samples, a.feasible_cells), (b.seen_samples, b.unseen_samples, b.feasible_cells));
    assert_eq!(a.curve.len(), b.curve.len());
    for (p, q) in a.curve.iter().zip(&b.curve) {
        assert!(close(p.bias, q.bias) && p.seen_acc == q.seen_acc && p.unseen_acc == q.unseen_acc, "{p:?} vs {q:?}");
    }
}

#[test]
fn golden_reports_match_the_exhaustive_oracle() {
    for v in VARIANTS {
        let golden = load_report(&golden_path(v)).unwrap();
        assert_close(&golden, &oracle_report(&fixture(), v));
    }
}

#[test]
fn binary_reproduces_the_golden_reports() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture();
    for v in VARIANTS {
        let out = dir.path().join(format!("{v}.json"));
        ok(run(&[
            "eval",
            "--data",
            p(&f.join("data")),
            "--model",
            p(&f.join("model")),
            "--mask",
            p(&f.join("mask.csv")),
            "--variant",
            v.as_str(),
            "--report",
            p(&out),
        ]));
        assert_close(&load_report(&out).unwrap(), &load_report(&golden_path(v)).unwrap());
    }
}

/// Rewrites the golden files from the oracle; run with `--ignored` after
/// changing the fixture.
#[test]
#[ignore]
fn regenerate_golden_reports() {
    for v in VARIANTS {
        save_report(&oracle_report(&fixture(), v), &golden_path(v)).unwrap();
    }
}
