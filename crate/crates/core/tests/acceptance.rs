//! Acceptance suite: one line per criterion, PASS or FAIL, then a single
//! assertion that everything passed.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tabgen::augmentor::{
    augment, first_argmax, fit_booster, fit_external_predictor, one_hot_space, ordinal_encode, pava,
    serialize_class, serialize_probs, serialize_target, AugmentedTarget, BoostParams,
};
use tabgen::backends::{OracleBackend, ProxyBackend};
use tabgen::baselines::{loss_and_gradients, Network};
use tabgen::config::Seeds;
use tabgen::evalharness::{
    aggregate, average_ranks, evaluate, fewshot_sweep, rank_models, EvalOptions, ModelKind, FEWSHOT_RATIOS,
};
use tabgen::ingest::{read_csv, Manifest, SplitSpec};
use tabgen::metadata::{MetadataCache, ReformatPolicy, ReformattedMetadata};
use tabgen::outparse::{parse_prediction, ParseStatus};
use tabgen::pipeline::{build_corpus, load_registry, prepare_split, resolve_registry, PipelineSettings};
use tabgen::promptgen::{assemble_prompt, AugmentationMode, Variant};
use tabgen::serializer::{serialize_features, SerializationConfig};

use common::{fixture, read_fixture, synthetic_dataset, synthetic_sweep_dataset, template_from_listing};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn golden_serialization() -> Outcome {
    let cases: serde_json::Value = serde_json::from_str(&read_fixture("golden/serialization.json")).unwrap();
    let cases = cases.as_array().unwrap();
    for case in cases {
        let file = case["file"].as_str().unwrap();
        let text = read_fixture(&format!("golden/{file}"));
        let mut d = read_csv(file, Path::new(file), text.as_bytes()).map_err(|e| e.to_string())?;
        let target = d.resolve_column(case["target"].as_str().unwrap()).unwrap().to_owned();
        d.target_column = Some(target);
        let row = &d.rows[case["row"].as_u64().unwrap() as usize];
        let got = serialize_features(row, &d, &SerializationConfig::default());
        let want = case["expected"].as_str().unwrap();
        ensure!(got == want, "{file}: got {got:?}, want {want:?}");
    }
    Ok(format!("{} listings byte-exact", cases.len()))
}

fn golden_targets() -> Outcome {
    let t: serde_json::Value = serde_json::from_str(&read_fixture("golden/targets.json")).unwrap();
    let floats = |v: &serde_json::Value| -> Vec<f64> { v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };

    let disc = &t["discrete"];
    let labels: Vec<String> = disc["space"].as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_owned()).collect();
    let space = one_hot_space(&labels, None).map_err(|e| e.to_string())?;
    ensure!(serialize_class(&space) == disc["class_details"].as_str().unwrap(), "class details differ: {}", serialize_class(&space));
    let true_class = labels.iter().position(|l| l == disc["example_target"].as_str().unwrap()).unwrap();
    let a = AugmentedTarget {
        probs: floats(&disc["probs"]),
        true_class,
    };
    ensure!(serialize_target(&a) == disc["serialization"].as_str().unwrap(), "discrete serialization: {}", serialize_target(&a));

    let cont = &t["continuous"];
    let s = serialize_probs(&floats(&cont["probs"]));
    ensure!(s == cont["serialization"].as_str().unwrap(), "continuous serialization: {s}");

    let parse = &t["parse"];
    let p = parse_prediction(parse["response"].as_str().unwrap(), 4);
    ensure!(p.probs == floats(&parse["probs"]), "parsed {:?}", p.probs);
    ensure!(p.predicted_class == Some(parse["class"].as_u64().unwrap() as usize), "class {:?}", p.predicted_class);
    ensure!(p.status == ParseStatus::Ok, "status {:?}", p.status);
    Ok("2 target strings and the parse example reproduce".into())
}

fn prompt_templates() -> Outcome {
    let meta = ReformattedMetadata {
        target: "Subscription Type".into(),
        description: "The target of the dataset is Subscription Type. \n Features and their explanations:\n User ID: unique identifier for each user.".into(),
    };
    let features = "User ID is 1448; Monthly Revenue is 14; Age is 33.\n";
    let instructions = "class 0 stands for \"Standard\"; class 1 stands for \"Premium\"; class 2 stands for \"Basic\"";
    for (variant, file) in [(Variant::Heavy, "templates/heavy.txt"), (Variant::Light, "templates/light.txt")] {
        let want = template_from_listing(&read_fixture(file))
            .replace("{metadata}", &meta.description)
            .replace("{features}", features)
            .replace("{instructions}", instructions);
        let got = assemble_prompt(variant, Some(&meta), features, instructions).map_err(|e| e.to_string())?;
        ensure!(got == want, "{variant}: got {got:?}\nwant {want:?}");
    }
    Ok("heavy and light listings reproduce".into())
}

/// Least-squares monotone fit by trying every partition into contiguous
/// blocks whose means are non-decreasing.
fn brute_isotonic(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut best = (f64::INFINITY, Vec::new());
    for mask in 0u32..(1 << (n - 1)) {
        let mut fit = Vec::with_capacity(n);
        let mut start = 0;
        let mut last = f64::NEG_INFINITY;
        let mut ok = true;
        for end in 1..=n {
            if end == n || mask & (1 << (end - 1)) != 0 {
                let mean = y[start..end].iter().sum::<f64>() / (end - start) as f64;
                if mean < last {
                    ok = false;
                    break;
                }
                last = mean;
                fit.extend(std::iter::repeat_n(mean, end - start));
                start = end;
            }
        }
        if !ok {
            continue;
        }
        let sse: f64 = fit.iter().zip(y).map(|(f, v)| (f - v).powi(2)).sum();
        if sse < best.0 - 1e-12 {
            best = (sse, fit);
        }
    }
    best.1
}

fn isotonic_oracle() -> Outcome {
    let mut instances = 0usize;
    for n in 1..=8u32 {
        for code in 0..4usize.pow(n) {
            let y: Vec<f64> = (0..n).map(|i| ((code >> (2 * i)) & 3) as f64).collect();
            let got = pava(&y, &vec![1.0; y.len()]);
            let want = brute_isotonic(&y);
            for (g, w) in got.iter().zip(&want) {
                ensure!((g - w).abs() <= 1e-9, "y={y:?}: pava {got:?}, brute force {want:?}");
            }
            instances += 1;
        }
    }
    Ok(format!("{instances} instances agree within 1e-9"))
}

fn calibration_invariants() -> Outcome {
    let mut checked = 0;
    for k in 0..20u64 {
        let classes = 2 + (k as usize % 4);
        let d = synthetic_dataset(&format!("cal{k}"), 100 + k, 60 + 5 * k as usize, classes, 2 + (k as usize % 3));
        let t = d.target_index().unwrap();
        let labels: Vec<String> = d.rows.iter().map(|r| r.cells[t].label().unwrap()).collect();
        let space = one_hot_space(&labels, None).map_err(|e| e.to_string())?;
        let y: Vec<usize> = d.rows.iter().map(|r| space.class_of(&r.cells[t]).unwrap()).collect();
        let (_, x) = ordinal_encode(&d.rows, &d.columns, Some(t));
        let model = fit_external_predictor(&x, &y, space.len(), &BoostParams::default(), k).map_err(|e| e.to_string())?;
        for (row, &c) in x.iter().zip(&y) {
            let a = augment(&model, row, c).map_err(|e| e.to_string())?;
            let sum: f64 = a.probs.iter().sum();
            ensure!((sum - 1.0).abs() <= 1e-6, "dataset {k}: sum {sum}");
            ensure!(first_argmax(&a.probs) == c, "dataset {k}: argmax {} != {c} in {:?}", first_argmax(&a.probs), a.probs);
            checked += 1;
        }
    }
    Ok(format!("{checked} augmented targets over 20 datasets"))
}

fn oracle_proxy_bracket() -> Outcome {
    let cache_dir = tempfile::tempdir().unwrap();
    let manifest = Manifest::load(&fixture("registry/manifest.json")).map_err(|e| e.to_string())?;
    let settings = PipelineSettings::default();
    let datasets = load_registry(&manifest, settings.max_rows, 0).map_err(|e| e.to_string())?;
    let registry = resolve_registry(datasets, None, &MetadataCache::new(cache_dir.path()), ReformatPolicy::default())
        .map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    for sd in &registry {
        let spec = SplitSpec::new(0.8, 7).unwrap();
        let prep = prepare_split(&sd.dataset, &sd.metadata, spec, &settings).map_err(|e| e.to_string())?;
        let model = prep.model.clone().ok_or("model did not fit")?;
        let items = prep.test_items(Variant::Heavy, &settings.serialization).map_err(|e| e.to_string())?;
        let n_classes = prep.space.len();

        let mut oracle = OracleBackend::new();
        for (row, text) in prep.test_references().map_err(|e| e.to_string())? {
            oracle.insert(&prep.dataset_id, row, text);
        }
        let o = evaluate(&prep.dataset_id, spec, &items, &oracle, n_classes, EvalOptions::default()).map_err(|e| e.to_string())?;
        ensure!(o.accuracy == 1.0, "{}: oracle accuracy {}", prep.dataset_id, o.accuracy);

        let mut proxy = ProxyBackend::new();
        proxy.add_dataset(&prep.test, model.clone());
        let p = evaluate(&prep.dataset_id, spec, &items, &proxy, n_classes, EvalOptions::default()).map_err(|e| e.to_string())?;
        let direct_correct = model
            .encoder
            .transform(&prep.test.rows)
            .iter()
            .zip(&prep.test_y)
            .filter(|(x, t)| model.ensemble.predict_class(x).unwrap() == **t)
            .count();
        let direct = direct_correct as f64 / prep.test_y.len() as f64;
        ensure!(p.counts.correct == direct_correct && p.accuracy == direct, "{}: proxy {} vs direct {}", prep.dataset_id, p.accuracy, direct);
        lines.push(format!("{} proxy={:.3}", prep.dataset_id, p.accuracy));
    }
    Ok(format!("oracle 1.0 everywhere; {}", lines.join(", ")))
}

fn boosting_sanity() -> Outcome {
    let x = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
    let y = vec![0, 1, 1, 0];
    let b = fit_booster(&x, &y, 2, &BoostParams::default());
    for (r, &t) in x.iter().zip(&y) {
        ensure!(first_argmax(&b.predict_proba(r)) == t, "XOR cell {r:?} misclassified");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bx = Vec::new();
    let mut by = Vec::new();
    for i in 0..500 {
        let c = i % 2;
        let u = rng.gen_range(0.0..4.0);
        let along = if c == 0 { -0.5 - u } else { 0.5 + u };
        bx.push(vec![along, rng.gen_range(-3.0..3.0)]);
        by.push(c);
    }
    let m = fit_external_predictor(&bx, &by, 2, &BoostParams::default(), 3).map_err(|e| e.to_string())?;
    let correct = bx.iter().zip(&by).filter(|(r, t)| m.predict_class(r).unwrap() == **t).count();
    let acc = correct as f64 / by.len() as f64;
    ensure!(acc >= 0.99, "blob train accuracy {acc}");
    Ok(format!("XOR 4/4, blobs train accuracy {acc:.3}"))
}

fn mlp_gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let y = vec![0, 1, 1, 0, 1];
    let mut net = Network::init(3, 4, 2, &mut rng);
    for j in 0..net.hidden {
        for r in &x {
            let z = net.b1[j] + (0..3).map(|i| net.w1[j * 3 + i] * r[i]).sum::<f64>();
            ensure!(z.abs() > 1e-3, "pre-activation {z} too close to the ReLU kink");
        }
    }
    let (_, analytic) = loss_and_gradients(&net, &x, &y);
    let theta = net.flatten();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..theta.len() {
        let mut p = theta.clone();
        p[k] += h;
        net.set_flat(&p);
        let up = loss_and_gradients(&net, &x, &y).0;
        p[k] -= 2.0 * h;
        net.set_flat(&p);
        let down = loss_and_gradients(&net, &x, &y).0;
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[k].abs().max(numeric.abs());
        let rel = if scale < 1e-10 { 0.0 } else { (analytic[k] - numeric).abs() / scale };
        worst = worst.max(rel);
    }
    net.set_flat(&theta);
    ensure!(worst < 1e-4, "max relative error {worst:e}");
    Ok(format!("{} parameters, max relative error {worst:.2e}", theta.len()))
}

fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .enumerate()
        .map(|(i, a)| {
            let better = v.iter().filter(|b| *b > a).count() as f64;
            let tied = v.iter().enumerate().filter(|(j, b)| *j != i && *b == a).count() as f64;
            1.0 + better + tied / 2.0
        })
        .collect()
}

fn rank_and_aggregate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for g in 0..1000 {
        let m = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=6);
        let models: Vec<String> = (0..m).map(|i| format!("m{i}")).collect();
        let mut grid = BTreeMap::new();
        for di in 0..d {
            let row: BTreeMap<String, f64> = models.iter().map(|k| (k.clone(), rng.gen_range(0..=10) as f64 / 10.0)).collect();
            grid.insert(format!("d{di}"), row);
        }
        let table = rank_models(&grid, &models);
        for (ds, row) in &grid {
            let v: Vec<f64> = models.iter().map(|k| row[k]).collect();
            let want = brute_ranks(&v);
            ensure!(average_ranks(&v) == want, "grid {g} dataset {ds}: ranks differ for {v:?}");
            let sum: f64 = models.iter().map(|k| table.ranks[ds][k]).sum();
            ensure!(sum == (m * (m + 1)) as f64 / 2.0, "grid {g}: rank sum {sum}");
        }
    }

    let mut rdr = csv::Reader::from_path(fixture("supervised_accuracy.csv")).unwrap();
    let col = rdr.headers().unwrap().iter().position(|h| h == "augmented-heavy").unwrap();
    let values: Vec<f64> = rdr.records().map(|r| r.unwrap()[col].parse().unwrap()).collect();
    ensure!(values.len() == 169, "{} rows in the accuracy fixture", values.len());
    let s = aggregate(&values).map_err(|e| e.to_string())?;
    ensure!((s.mean - 0.721).abs() <= 0.001, "mean {}", s.mean);
    Ok(format!("1000 grids match; 169-dataset mean {:.4} (median {:.3})", s.mean, s.median))
}

fn fewshot_shape() -> Outcome {
    let registry: Vec<_> = (0..10)
        .map(|i| synthetic_sweep_dataset(&format!("syn{i:02}"), 500 + i, 100 + 10 * i as usize, 2 + i as usize % 3))
        .collect();
    let models = [ModelKind::Oracle, ModelKind::Proxy, ModelKind::TreeEnsemble, ModelKind::Mlp];
    let settings = PipelineSettings::default();
    let run = || fewshot_sweep(&registry, &FEWSHOT_RATIOS, &models, None, &settings, 0).map_err(|e| e.to_string());
    let a = run()?;
    ensure!(a.errors.is_empty(), "cell errors: {:?}", a.errors);
    ensure!(a.warnings.is_empty(), "warnings: {:?}", a.warnings);
    ensure!(a.rows.len() == FEWSHOT_RATIOS.len() * models.len(), "{} report rows", a.rows.len());
    for (ratio, t) in FEWSHOT_RATIOS.iter().zip(&a.tables) {
        ensure!(t.ratio == *ratio && t.table.accuracy.len() == registry.len(), "ratio {ratio}: incomplete table");
        for row in t.table.accuracy.values() {
            ensure!(row.len() == models.len(), "ratio {ratio}: missing model cell");
        }
        let oracle = &t.table.accuracy_summary["oracle"];
        ensure!(oracle.mean == 1.0, "oracle mean {} at ratio {ratio}", oracle.mean);
    }
    let b = run()?;
    ensure!(serde_json::to_string(&a).unwrap() == serde_json::to_string(&b).unwrap(), "reruns differ");
    Ok(format!("{} ratios x {} models, identical on rerun", FEWSHOT_RATIOS.len(), models.len()))
}

fn corpus_determinism() -> Outcome {
    let manifest = Manifest::load(&fixture("registry/manifest.json")).map_err(|e| e.to_string())?;
    let mut hashes = Vec::new();
    for mode in [AugmentationMode::Augmented, AugmentationMode::Onehot] {
        let settings = PipelineSettings {
            mode,
            seeds: Seeds {
                cutoff: 1,
                split: 2,
                training: 3,
            },
            ..PipelineSettings::default()
        };
        let build = || -> Result<(String, Vec<u8>), String> {
            let dir = tempfile::tempdir().unwrap();
            let cache = MetadataCache::new(dir.path().join("cache"));
            let datasets = load_registry(&manifest, settings.max_rows, settings.seeds.cutoff).map_err(|e| e.to_string())?;
            let registry = resolve_registry(datasets, None, &cache, ReformatPolicy::default()).map_err(|e| e.to_string())?;
            let out = dir.path().join("corpus.jsonl");
            let m = build_corpus(&registry, 0.8, &settings, &out).map_err(|e| e.to_string())?;
            Ok((m.content_hash, std::fs::read(&out).unwrap()))
        };
        let (h1, b1) = build()?;
        let (h2, b2) = build()?;
        ensure!(h1 == h2 && b1 == b2, "{mode}: cold builds differ");
        hashes.push(format!("{mode}={}", &h1[..12]));
    }
    Ok(hashes.join(", "))
}

#[test]
fn acceptance() {
    let criteria: Vec<(&str, Duration, fn() -> Outcome)> = vec![
        ("golden serialization", Duration::from_secs(1), golden_serialization),
        ("golden target serialization", Duration::from_secs(1), golden_targets),
        ("prompt templates", Duration::from_secs(1), prompt_templates),
        ("isotonic oracle equivalence", Duration::from_secs(30), isotonic_oracle),
        ("calibration invariants", Duration::from_secs(60), calibration_invariants),
        ("oracle/proxy bracket", Duration::from_secs(120), oracle_proxy_bracket),
        ("boosting sanity", Duration::from_secs(60), boosting_sanity),
        ("MLP gradient check", Duration::from_secs(10), mlp_gradient_check),
        ("rank/aggregate harness", Duration::from_secs(30), rank_and_aggregate),
        ("few-shot sweep shape", Duration::from_secs(300), fewshot_shape),
        ("corpus determinism", Duration::from_secs(120), corpus_determinism),
    ];
    let mut failed = Vec::new();
    writeln!(std::io::stdout()).unwrap();
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let status = match &outcome {
            Ok(_) if elapsed <= budget => "PASS",
            _ => "FAIL",
        };
        let detail = match &outcome {
            Ok(d) if elapsed <= budget => d.clone(),
            Ok(d) => format!("{d}; over the {budget:?} budget"),
            Err(e) => e.clone(),
        };
        // straight to the handle so the lines survive libtest's capture
        let mut out = std::io::stdout().lock();
        writeln!(out, "{status} {name} [{:.2}s / {}s]: {detail}", elapsed.as_secs_f64(), budget.as_secs()).unwrap();
        if status == "FAIL" {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
