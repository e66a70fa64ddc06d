use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use sasow_core::data::{
    generate_synthetic, load_dataset, perturb_moving, reduce_train_compositions,
    save_dataset_with_notes, synthetic_embeddings, MovingMode, SyntheticConfig,
};
use sasow_core::evaluation::{
    format_comparison, save_report, write_curve_csv, BiasGrid, EvalReport, Variant,
};
use sasow_core::feasibility::{
    build_mask, calibrate_tau, load_embeddings, load_mask, save_embeddings, save_mask,
    DEFAULT_TAU_KEEP,
};
use sasow_core::training::{load_trained, save_outcome, TrainedPair, SUMMARY_FILE};
use sasow_core::{ClassifierKind, Dataset, FeasibilityMask, TrainConfig};

use crate::exit::{usage, Usage};
use crate::{ClassifierChoice, EvalArgs, FeasibilityArgs, GenDataArgs, TrainArgs, VariantChoice};

const SEED_ENV: &str = "SASOW_SEED";
const EMBEDDINGS_FILE: &str = "embeddings.csv";

/// `SASOW_SEED`, when set, replaces every seed given by flags or configs.
fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Failing to read an input is the caller's problem (exit 2), unlike
/// failing to write an output (exit 3).
fn read_input<T>(what: &str, path: &Path, r: sasow_core::Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        sasow_core::Error::Io { .. } => Usage(format!("cannot read {what} {}: {e}", path.display())).into(),
        other => anyhow::Error::new(other).context(format!("{what} {}", path.display())),
    })
}

fn load_data(path: &Path) -> Result<Dataset> {
    read_input("dataset", path, load_dataset(path))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let seed = seed_override()?.unwrap_or(a.seed);
    let mut cfg = SyntheticConfig::new(
        a.states,
        a.objects,
        a.dim,
        a.images_per_comp,
        a.seen_frac,
        a.noise,
        seed,
    );
    cfg.state_noise_sigma = a.state_noise;
    if let Some(f) = a.seen_test_frac {
        cfg.seen_test_fraction = f;
    }
    if let Some(s) = a.train_share {
        cfg.train_share = s;
    }
    cfg.patch_count = a.patches;
    let moving: Option<MovingMode> = a
        .moving
        .as_deref()
        .map(|m| m.parse().map_err(|e: sasow_core::Error| usage(e.to_string())))
        .transpose()?;

    let mut ds = generate_synthetic(&cfg)?;
    if let Some(mode) = moving {
        ds = perturb_moving(&ds, mode, a.patches, seed)?;
    }
    if let Some(keep) = a.reduce_comps {
        ds = reduce_train_compositions(&ds, keep, seed)?;
    }
    let notes = serde_json::json!({
        "generator": cfg,
        "moving": moving.map(|m| m.to_string()),
        "reduce_comps": a.reduce_comps,
    });
    save_dataset_with_notes(&ds, &a.out, Some(notes))?;
    // The prototypes double as primitive embeddings for `feasibility`.
    save_embeddings(&synthetic_embeddings(&cfg)?, &a.out.join(EMBEDDINGS_FILE))?;
    let c = ds.counts();
    println!(
        "wrote {}: {} train compositions / {} images, test {} seen / {} images, {} unseen / {} images",
        a.out.display(),
        c.train_compositions,
        c.train_images,
        c.test_seen_compositions,
        c.test_seen_images,
        c.test_unseen_compositions,
        c.test_unseen_images
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let mut cfg = match &a.config {
        Some(p) => read_input("config", p, TrainConfig::load(p))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    let kinds = match a.classifier {
        None => vec![cfg.classifier],
        Some(ClassifierChoice::Mlp) => vec![ClassifierKind::Mlp],
        Some(ClassifierChoice::Attention) => vec![ClassifierKind::Attention],
        Some(ClassifierChoice::Both) => vec![ClassifierKind::Mlp, ClassifierKind::Attention],
    };
    for kind in kinds {
        cfg.classifier = kind;
        let outcome = sasow_core::train(&ds, &cfg).with_context(|| format!("training {kind} classifiers"))?;
        let dir = a.out.join(kind.as_str());
        let summary = save_outcome(&outcome, &cfg, &dir)?;
        println!(
            "{kind}: a_sta {:.4} a_obj {:.4} -> {}",
            summary.a_sta,
            summary.a_obj,
            dir.display()
        );
    }
    Ok(())
}

enum Tau {
    Auto,
    Value(f64),
}

fn parse_tau(s: &str) -> Result<Tau> {
    if s == "auto" {
        return Ok(Tau::Auto);
    }
    let v: f64 = s
        .parse()
        .map_err(|_| usage(format!("tau {s:?} is neither a number nor `auto`")))?;
    if !(-1.0..=1.0).contains(&v) {
        return Err(usage(format!("tau {v} outside [-1, 1]")));
    }
    Ok(Tau::Value(v))
}

/// Threshold the embedding similarities; `auto` keeps 95% of the dataset's
/// unseen compositions feasible.
fn mask_from_embeddings(ds: &Dataset, path: &Path, tau: &str) -> Result<(FeasibilityMask, f64)> {
    let tau = parse_tau(tau)?;
    let emb = read_input("embeddings", path, load_embeddings(path))?;
    emb.check_covers(&ds.vocab)?;
    let tau = match tau {
        Tau::Value(v) => v,
        Tau::Auto => {
            let t = calibrate_tau(&emb, &ds.vocab, &ds.split.seen, &ds.split.unseen, DEFAULT_TAU_KEEP)?;
            info!("calibrated tau = {t}");
            t
        }
    };
    Ok((build_mask(&emb, &ds.vocab, &ds.split.seen, tau)?, tau))
}

fn warn_uncovered(mask: &FeasibilityMask, ds: &Dataset) -> usize {
    let missing: Vec<_> = mask.uncovered(&ds.split.seen).collect();
    for c in &missing {
        warn!(
            "seen composition ({}, {}) is infeasible under the mask",
            ds.vocab.states[c.state], ds.vocab.objects[c.object]
        );
    }
    missing.len()
}

pub fn feasibility(a: &FeasibilityArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let (mask, tau) = mask_from_embeddings(&ds, &a.embeddings, &a.tau)?;
    save_mask(&mask, &ds.vocab, &a.out)?;
    let total = ds.vocab.n_states() * ds.vocab.n_objects();
    println!("feasible cells: {} of {total} (tau {tau})", mask.count());
    match warn_uncovered(&mask, &ds) {
        0 => println!("seen coverage: all {} seen compositions feasible", ds.split.seen.len()),
        n => println!("seen coverage: {n} of {} seen compositions infeasible", ds.split.seen.len()),
    }
    Ok(())
}

/// `<model>/<kind>/` as written by `train`, or `<model>` itself when it
/// holds a checkpoint of that kind.
fn model_dir(model: &Path, kind: ClassifierKind) -> Option<PathBuf> {
    let nested = model.join(kind.as_str());
    if nested.join(SUMMARY_FILE).is_file() {
        return Some(nested);
    }
    let text = fs::read_to_string(model.join(SUMMARY_FILE)).ok()?;
    let summary: serde_json::Value = serde_json::from_str(&text).ok()?;
    (summary.get("classifier")?.as_str()? == kind.as_str()).then(|| model.to_path_buf())
}

fn load_pair(model: &Path, kind: ClassifierKind, ds: &Dataset) -> Result<TrainedPair> {
    let dir = model_dir(model, kind)
        .ok_or_else(|| usage(format!("no {kind} checkpoint under {}", model.display())))?;
    let pair = read_input("checkpoint", &dir, load_trained(&dir))?;
    if pair.summary.dataset_fingerprint != ds.fingerprint() {
        warn!("{kind} checkpoint was trained on a different dataset than {}", ds.fingerprint());
    }
    Ok(pair)
}

fn requested_variants(a: &EvalArgs) -> Result<Vec<Variant>> {
    let pick = |v| Ok(vec![v]);
    match a.variant {
        Some(VariantChoice::All) => Ok(Variant::ALL.to_vec()),
        Some(VariantChoice::KgSp) => pick(Variant::KgSp),
        Some(VariantChoice::KgSa) => pick(Variant::KgSa),
        Some(VariantChoice::KgSow) => pick(Variant::KgSow),
        Some(VariantChoice::Sasow) => pick(Variant::Sasow),
        None => {
            let kinds: Vec<ClassifierKind> = [ClassifierKind::Mlp, ClassifierKind::Attention]
                .into_iter()
                .filter(|k| model_dir(&a.model, *k).is_some())
                .collect();
            match kinds.as_slice() {
                [k] => pick(Variant::from_parts(*k, a.weighted)),
                [] => Err(usage(format!("no checkpoint under {}", a.model.display()))),
                _ => Err(usage("both classifier kinds are present; choose one with --variant")),
            }
        }
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let variants = requested_variants(a)?;
    let all = variants.len() > 1;
    if all && a.curve_csv.is_some() {
        return Err(usage("--curve-csv needs a single variant; --variant all writes curves next to the reports"));
    }
    let (n_states, n_objects) = (ds.vocab.n_states(), ds.vocab.n_objects());
    let mask = match (&a.mask, &a.embeddings, &a.tau) {
        (Some(p), _, _) => read_input("mask", p, load_mask(p, &ds.vocab))?,
        (None, Some(p), Some(t)) => mask_from_embeddings(&ds, p, t)?.0,
        _ => {
            if !a.no_mask {
                info!("no mask given; every composition is feasible");
            }
            FeasibilityMask::all_feasible(n_states, n_objects)?
        }
    };
    warn_uncovered(&mask, &ds);

    let mut pairs: Vec<(ClassifierKind, TrainedPair)> = Vec::new();
    for v in &variants {
        if !pairs.iter().any(|(k, _)| *k == v.kind()) {
            pairs.push((v.kind(), load_pair(&a.model, v.kind(), &ds)?));
        }
    }
    let grid = BiasGrid::Sweep(a.bias_points);

    // Variants only read the shared dataset, mask and models.
    let reports: Vec<EvalReport> = std::thread::scope(|scope| {
        let handles: Vec<_> = variants
            .iter()
            .map(|&variant| {
                let pair = &pairs.iter().find(|(k, _)| *k == variant.kind()).expect("loaded above").1;
                let (ds, mask, grid) = (&ds, &mask, &grid);
                scope.spawn(move || {
                    sasow_core::evaluate_open_world(
                        &pair.state_model,
                        &pair.object_model,
                        &pair.summary.accuracy(),
                        ds,
                        mask,
                        variant,
                        grid,
                    )
                    .with_context(|| format!("evaluating {variant}"))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect::<Result<_>>()
    })?;

    if all {
        fs::create_dir_all(&a.report).with_context(|| format!("creating {}", a.report.display()))?;
        for r in &reports {
            save_report(r, &a.report.join(format!("{}.json", r.variant)))?;
            write_curve_csv(r, &a.report.join(format!("{}.curve.csv", r.variant)))?;
        }
        let table = format_comparison(&reports);
        let path = a.report.join("comparison.txt");
        fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
        print!("{table}");
    } else {
        let r = &reports[0];
        save_report(r, &a.report)?;
        if let Some(p) = &a.curve_csv {
            write_curve_csv(r, p)?;
        }
        print!("{}", format_comparison(&reports));
    }
    Ok(())
}
