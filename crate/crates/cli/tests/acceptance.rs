use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ctnet_core::bilinear::{bilinear_pool, BilinearPooling};
use ctnet_core::checkpoint;
use ctnet_core::data::{
    load_manifest_dataset, read_manifest, write_manifest, SplitIndices, MANIFEST_FILE,
};
use ctnet_core::eval::{
    kfold_pair_eval, read_confusion, read_pairs, read_roc, read_rows, read_sweep, roc_auc,
    write_confusion, write_roc, write_rows, write_sweep, RocCurve,
};
use ctnet_core::gradcheck::{run_suite, CheckConfig};
use ctnet_core::losses::{
    constrained_triplet_loss, cross_entropy, joint_loss, triplet_loss, weighted_softmax_loss,
    Margins, SimilarityMatrix,
};
use ctnet_core::mining::{mine_triplets, MiningStrategy, Triplet};
use ctnet_core::tensor::{Tape, Tensor};
use ctnet_core::trainer::{
    predict, read_history, write_history, TrainState, CHECKPOINT_LATEST, HISTORY_FILE,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.conf");

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ctnet(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ctnet"))
        .args(args)
        .env("CTNET_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "ctnet {} failed: {}",
            args.first().unwrap_or(&""),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let p = tape.softmax(x, 1).unwrap();
    tape.value(p).clone()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let config = CheckConfig::default();
    let reports = run_suite(&config).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    ensure(failed.is_empty(), || {
        format!("failing checks: {}", failed.join(", "))
    })?;
    ensure(reports.iter().all(|r| r.trials >= 20), || {
        "fewer than 20 trials".into()
    })?;
    for name in [
        "triplet_loss",
        "constrained_triplet_loss",
        "weighted_softmax_loss",
        "joint_loss",
        "network_joint_loss",
    ] {
        ensure(reports.iter().any(|r| r.name == name), || {
            format!("no check named {name}")
        })?;
    }
    ensure(secs < 300.0, || format!("suite took {secs:.1}s"))?;
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(format!(
        "{} checks x {} trials, worst rel err {worst:.2e}, {secs:.1}s",
        reports.len(),
        config.trials
    ))
}

fn bilinear_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let (y, n, m) = (
            rng.gen_range(1..=10),
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
        );
        let a = random_matrix(&mut rng, y, n, 2.0);
        let b = random_matrix(&mut rng, y, m, 2.0);
        let pooled = bilinear_pool(&a, &b, BilinearPooling::Sum).map_err(|e| e.to_string())?;
        let mut oracle = vec![0.0; n * m];
        for l in 0..y {
            for i in 0..n {
                for j in 0..m {
                    oracle[i * m + j] += a.data()[l * n + i] * b.data()[l * m + j];
                }
            }
        }
        for (x, o) in pooled.data().iter().zip(&oracle) {
            worst = worst.max((x - o).abs());
        }
        let mut order: Vec<usize> = (0..y).collect();
        order.shuffle(&mut rng);
        let permute = |t: &Tensor, c: usize| {
            let d: Vec<f64> = order
                .iter()
                .flat_map(|&r| t.data()[r * c..(r + 1) * c].to_vec())
                .collect();
            Tensor::new(vec![y, c], d).unwrap()
        };
        let shuffled =
            bilinear_pool(&permute(&a, n), &permute(&b, m), BilinearPooling::Sum).unwrap();
        ensure(shuffled.data() == pooled.data(), || {
            format!("case {case}: permutation changed the result")
        })?;
    }
    ensure(worst <= 1e-12, || format!("max abs err {worst:.2e}"))?;
    Ok(format!(
        "100 cases, max abs err {worst:.2e}, permutations exact"
    ))
}

fn loss_reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let (rows, dim) = (rng.gen_range(1..=8), rng.gen_range(1..=6));
        let a = random_matrix(&mut rng, rows, dim, 1.0);
        let p = random_matrix(&mut rng, rows, dim, 1.0);
        let n = random_matrix(&mut rng, rows, dim, 1.0);
        let mu1 = rng.gen_range(0.01..2.0);
        let margins = Margins {
            mu1,
            mu2: rng.gen_range(0.01..2.0),
            b: 0.0,
            alpha_t: 0.5,
        };
        let constrained = constrained_triplet_loss(&a, &p, &n, &margins).unwrap();
        let plain = triplet_loss(&a, &p, &n, mu1).unwrap();
        ensure(constrained == plain, || {
            format!("case {case}: b=0 gives {constrained} vs {plain}")
        })?;

        let k = rng.gen_range(2..=6);
        let probs = softmax_rows(&random_matrix(&mut rng, rows, k, 4.0));
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..k)).collect();
        let identity = SimilarityMatrix::identity(k, 0.9).unwrap();
        let zero = weighted_softmax_loss(&probs, &labels, &identity).unwrap();
        ensure(zero == 0.0, || {
            format!("case {case}: identity gives {zero}")
        })?;
        let uniform = SimilarityMatrix::uniform(k, 0.9).unwrap();
        let w = weighted_softmax_loss(&probs, &labels, &uniform).unwrap();
        let expected = (k - 1) as f64 / k as f64 * cross_entropy(&probs, &labels).unwrap();
        worst = worst.max((w - expected).abs());

        let (ls, lt) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
        ensure(joint_loss(ls, lt, 1.0).unwrap() == ls, || {
            format!("case {case}: alpha=1")
        })?;
        ensure(joint_loss(ls, lt, 0.0).unwrap() == lt, || {
            format!("case {case}: alpha=0")
        })?;
    }
    ensure(worst <= 1e-12, || {
        format!("uniform matrix off by {worst:.2e}")
    })?;
    Ok(format!(
        "200 cases, uniform-matrix err {worst:.2e}, other identities exact"
    ))
}

fn mining_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut anchors = 0;
    let mut batches = 0;
    while batches < 500 {
        let b = rng.gen_range(2..=16);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..4)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        batches += 1;
        let mut d = vec![0.0; b * b];
        for i in 0..b {
            for j in i + 1..b {
                d[i * b + j] = f64::from(rng.gen_range(0u8..6));
                d[j * b + i] = d[i * b + j];
            }
        }
        let mut expected = Vec::new();
        for a in 0..b {
            let mut best: Option<(f64, usize, usize)> = None;
            for p in (0..b).filter(|&p| p != a && labels[p] == labels[a]) {
                for n in (0..b).filter(|&n| labels[n] != labels[a]) {
                    let gap = d[a * b + p] - d[a * b + n];
                    if best.is_none_or(|(g, _, _)| gap > g) {
                        best = Some((gap, p, n));
                    }
                }
            }
            if let Some((_, p, n)) = best {
                expected.push(Triplet::new(a, p, n));
            }
        }
        let dist = Tensor::new(vec![b, b], d).unwrap();
        let mined = mine_triplets(&dist, &labels, MiningStrategy::Hard, &mut rng.clone())
            .map_err(|e| e.to_string())?;
        ensure(mined == expected, || {
            format!("batch {batches}: {mined:?} vs {expected:?}")
        })?;
        anchors += expected.len();
    }
    Ok(format!("500 batches, {anchors} anchors identical"))
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut sets = 0;
    while sets < 200 {
        let n = rng.gen_range(2..=200);
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.gen_range(0u8..20)) / 10.0)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        sets += 1;
        let (mut hits, mut total) = (0.0, 0.0);
        for i in (0..n).filter(|&i| labels[i]) {
            for j in (0..n).filter(|&j| !labels[j]) {
                total += 1.0;
                if scores[i] > scores[j] {
                    hits += 1.0;
                } else if scores[i] == scores[j] {
                    hits += 0.5;
                }
            }
        }
        let auc = roc_auc(&scores, &labels).map_err(|e| e.to_string())?.auc;
        worst = worst.max((auc - hits / total).abs());
    }
    ensure(worst <= 1e-9, || format!("max abs err {worst:.2e}"))?;
    Ok(format!("200 score sets, max abs err {worst:.2e}"))
}

struct DeskRun {
    data: PathBuf,
    joint: PathBuf,
    pairs: PathBuf,
    softmax_only: PathBuf,
}

fn desk_convergence(run: &DeskRun) -> Outcome {
    let start = Instant::now();
    ctnet(&[
        "synth",
        "--classes",
        "4",
        "--per-class",
        "200",
        "--size",
        "32x32",
        "--seed",
        "7",
        "--out",
        s(&run.data),
    ])?;
    ctnet(&[
        "train",
        "--data",
        s(&run.data),
        "--config",
        CONFIG,
        "--out",
        s(&run.joint),
    ])?;
    ctnet(&[
        "pairs",
        "--data",
        s(&run.data),
        "--checkpoint",
        s(&run.joint),
        "--folds",
        "10",
        "--count",
        "600",
        "--out",
        s(&run.pairs),
    ])?;
    let secs = start.elapsed().as_secs_f64();
    let history = read_history(&run.joint.join(HISTORY_FILE)).map_err(|e| e.to_string())?;
    let last = history.last().ok_or("empty history")?;
    let rows = read_pairs(&run.pairs.join("pairs.csv")).map_err(|e| e.to_string())?;
    let folds = rows.iter().map(|r| r.fold).max().map_or(0, |f| f + 1);
    let mean = (0..folds)
        .map(|f| {
            let fold: Vec<_> = rows.iter().filter(|r| r.fold == f).collect();
            fold.iter().filter(|r| r.correct).count() as f64 / fold.len() as f64
        })
        .sum::<f64>()
        / folds as f64;
    let detail = format!(
        "val acc {:.4} after {} epochs, pair mean acc {mean:.4}, {secs:.0}s",
        last.val_acc, last.epoch
    );
    ensure(last.epoch <= 30, || format!("{} epochs", last.epoch))?;
    ensure(last.val_acc >= 0.95, || detail.clone())?;
    ensure(mean >= 0.90, || detail.clone())?;
    ensure(secs < 900.0, || detail.clone())?;
    Ok(detail)
}

fn test_embeddings(data: &Path, ckpt_dir: &Path) -> Result<(Tensor, Vec<usize>), String> {
    let state = checkpoint::load(&ckpt_dir.join(CHECKPOINT_LATEST)).map_err(|e| e.to_string())?;
    let (h, w) = state.config.image_size;
    let (ds, assignment) = load_manifest_dataset(data, h, w).map_err(|e| e.to_string())?;
    let test = ds.subset(&SplitIndices::from_assignment(&assignment).test);
    let (_, emb) = predict(&state.network, test.images()).map_err(|e| e.to_string())?;
    Ok((emb, test.labels().to_vec()))
}

/// Mean inter-class over mean intra-class Euclidean distance.
fn separation(emb: &Tensor, labels: &[usize]) -> f64 {
    let dim = emb.shape()[1];
    let row = |i: usize| &emb.data()[i * dim..(i + 1) * dim];
    let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let d = row(i)
                .iter()
                .zip(row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if labels[i] == labels[j] {
                intra += d;
                ni += 1.0;
            } else {
                inter += d;
                ne += 1.0;
            }
        }
    }
    (inter / ne) / (intra / ni)
}

fn discriminative_structure(run: &DeskRun) -> Outcome {
    let (emb, labels) = test_embeddings(&run.data, &run.joint)?;
    let joint = separation(&emb, &labels);
    ctnet(&[
        "train",
        "--data",
        s(&run.data),
        "--config",
        CONFIG,
        "--set",
        "alpha=1",
        "--out",
        s(&run.softmax_only),
    ])?;
    let (emb, labels) = test_embeddings(&run.data, &run.softmax_only)?;
    let softmax = separation(&emb, &labels);
    let detail = format!("inter/intra ratio {joint:.3} at alpha 0.55, {softmax:.3} at alpha 1");
    ensure(joint >= 2.0, || detail.clone())?;
    ensure(softmax <= 1.1 * joint, || detail.clone())?;
    Ok(detail)
}

fn protocol(run: &DeskRun) -> Outcome {
    let rows = read_pairs(&run.pairs.join("pairs.csv")).map_err(|e| e.to_string())?;
    let same = rows.iter().filter(|r| r.same_class).count();
    let folds = rows.iter().map(|r| r.fold).max().map_or(0, |f| f + 1);
    ensure(rows.len() == 600 && same == 360 && folds == 10, || {
        format!("{} pairs, {same} same, {folds} folds", rows.len())
    })?;

    let distances: Vec<f64> = rows.iter().map(|r| r.distance).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.same_class).collect();
    let base = kfold_pair_eval(&distances, &labels, 10).map_err(|e| e.to_string())?;
    let recorded: Vec<f64> = (0..10)
        .map(|f| rows.iter().find(|r| r.fold == f).unwrap().threshold)
        .collect();
    ensure(base.thresholds() == recorded, || {
        "recomputed thresholds differ from pairs.csv".into()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (f, fold) in base.folds.iter().enumerate() {
        let mut permuted = labels.clone();
        permuted[fold.start..fold.end].shuffle(&mut rng);
        for flip in permuted[fold.start..fold.end].iter_mut().step_by(3) {
            *flip = !*flip;
        }
        let again = kfold_pair_eval(&distances, &permuted, 10).unwrap();
        ensure(again.folds[f].threshold == fold.threshold, || {
            format!("fold {f}: threshold moved when its own labels changed")
        })?;
    }

    let separable: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &same)| {
            if same {
                0.5 + i as f64 * 1e-4
            } else {
                2.0 + i as f64 * 1e-4
            }
        })
        .collect();
    let perfect = kfold_pair_eval(&separable, &labels, 10)
        .unwrap()
        .mean_accuracy;
    ensure(perfect == 1.0, || {
        format!("separable distances give {perfect}")
    })?;
    Ok("600 pairs (360 same), 10 folds, thresholds label-blind, separable gives 1.0".into())
}

fn rewrite_matches(
    path: &Path,
    rewrite: impl FnOnce(&Path) -> Result<(), String>,
) -> Result<(), String> {
    let original = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let copy = path.with_extension("roundtrip");
    rewrite(&copy)?;
    let again = std::fs::read(&copy).map_err(|e| e.to_string())?;
    std::fs::remove_file(&copy).ok();
    ensure(original == again, || {
        format!("{} does not round-trip", path.display())
    })
}

fn determinism(root: &Path) -> Outcome {
    let data = root.join("small");
    ctnet(&[
        "synth",
        "--classes",
        "4",
        "--per-class",
        "30",
        "--size",
        "16",
        "--seed",
        "3",
        "--out",
        s(&data),
    ])?;
    let small = [
        "--config",
        CONFIG,
        "--set",
        "image_size=16x16",
        "--set",
        "epochs=3",
        "--set",
        "phase1_epochs=1",
        "--set",
        "steps_per_epoch=4",
    ];
    let train = |out: &Path| {
        let mut args = vec!["train", "--data", s(&data), "--out", s(out)];
        args.extend(small);
        ctnet(&args)
    };
    let (a, b) = (root.join("a"), root.join("b"));
    train(&a)?;
    train(&b)?;
    for f in [
        "epoch_001.ckpt",
        "epoch_002.ckpt",
        "latest.ckpt",
        HISTORY_FILE,
    ] {
        ensure(
            std::fs::read(a.join(f)).ok() == std::fs::read(b.join(f)).ok(),
            || format!("{f} differs between runs"),
        )?;
    }

    let state = checkpoint::load(&a.join(CHECKPOINT_LATEST)).map_err(|e| e.to_string())?;
    let resaved = root.join("resaved.ckpt");
    checkpoint::save(&resaved, &state).map_err(|e| e.to_string())?;
    let loaded: TrainState = checkpoint::load(&resaved).map_err(|e| e.to_string())?;
    let (ds, _) = load_manifest_dataset(&data, 16, 16).map_err(|e| e.to_string())?;
    let (p0, e0) = predict(&state.network, ds.images()).unwrap();
    let (p1, e1) = predict(&loaded.network, ds.images()).unwrap();
    ensure(p0.data() == p1.data() && e0.data() == e1.data(), || {
        "forward outputs changed after reload".into()
    })?;

    let eval = root.join("eval");
    ctnet(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&a),
        "--out",
        s(&eval),
        "--count",
        "100",
    ])?;
    let sweep = root.join("sweep");
    let mut args = vec![
        "sweep-alpha",
        "--data",
        s(&data),
        "--out",
        s(&sweep),
        "--alphas",
        "0.5,1",
    ];
    args.extend(small);
    ctnet(&args)?;

    let mut checked = vec![];
    let history = read_history(&a.join(HISTORY_FILE)).map_err(|e| e.to_string())?;
    rewrite_matches(&a.join(HISTORY_FILE), |p| {
        write_history(p, &history).map_err(|e| e.to_string())
    })?;
    checked.push(HISTORY_FILE.to_string());
    let rows = read_rows(&eval.join("report.csv")).map_err(|e| e.to_string())?;
    rewrite_matches(&eval.join("report.csv"), |p| {
        write_rows(p, &rows).map_err(|e| e.to_string())
    })?;
    checked.push("report.csv".into());
    let (names, cm) = read_confusion(&eval.join("confusion.csv")).map_err(|e| e.to_string())?;
    rewrite_matches(&eval.join("confusion.csv"), |p| {
        write_confusion(p, &names, &cm).map_err(|e| e.to_string())
    })?;
    checked.push("confusion.csv".into());
    let mut roc_files: Vec<PathBuf> = std::fs::read_dir(&eval)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("roc_"))
        .collect();
    roc_files.sort();
    ensure(roc_files.len() == 4, || {
        format!("{} roc files", roc_files.len())
    })?;
    for f in &roc_files {
        let points = read_roc(f).map_err(|e| e.to_string())?;
        rewrite_matches(f, |p| {
            write_roc(p, &RocCurve { points, auc: 0.0 }).map_err(|e| e.to_string())
        })?;
    }
    checked.push(format!("{} roc_*.csv", roc_files.len()));
    let pair_rows = read_pairs(&eval.join("pairs.csv")).map_err(|e| e.to_string())?;
    rewrite_matches(&eval.join("pairs.csv"), |p| {
        let mut w = csv::Writer::from_path(p).map_err(|e| e.to_string())?;
        for r in &pair_rows {
            w.serialize(r).map_err(|e| e.to_string())?;
        }
        w.flush().map_err(|e| e.to_string())
    })?;
    checked.push("pairs.csv".into());
    let sweep_rows = read_sweep(&sweep.join("sweep.csv")).map_err(|e| e.to_string())?;
    ensure(sweep_rows.len() == 2, || "sweep rows".into())?;
    let sweep_copy = root.join("sweep_copy");
    std::fs::create_dir_all(&sweep_copy).unwrap();
    write_sweep(&sweep_copy, &sweep_rows).map_err(|e| e.to_string())?;
    ensure(
        std::fs::read(sweep.join("sweep.csv")).ok()
            == std::fs::read(sweep_copy.join("sweep.csv")).ok(),
        || "sweep.csv does not round-trip".into(),
    )?;
    checked.push("sweep.csv".into());
    let manifest = read_manifest(&data.join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    rewrite_matches(&data.join(MANIFEST_FILE), |p| {
        write_manifest(p, &manifest).map_err(|e| e.to_string())
    })?;
    checked.push(MANIFEST_FILE.into());

    Ok(format!(
        "identical bytes over two runs, reload keeps outputs, round-trips: {}",
        checked.join(", ")
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let run = DeskRun {
        data: tmp.path().join("desk_data"),
        joint: tmp.path().join("desk_joint"),
        pairs: tmp.path().join("desk_pairs"),
        softmax_only: tmp.path().join("desk_alpha1"),
    };
    let det_root = tmp.path().join("det");
    std::fs::create_dir_all(&det_root).unwrap();

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient correctness", Box::new(gradients)),
        ("bilinear pooling oracle", Box::new(bilinear_oracle)),
        ("loss reductions", Box::new(loss_reductions)),
        ("mining oracle", Box::new(mining_oracle)),
        ("AUC oracle", Box::new(auc_oracle)),
        (
            "desk-scale convergence",
            Box::new(|| desk_convergence(&run)),
        ),
        (
            "discriminative structure",
            Box::new(|| discriminative_structure(&run)),
        ),
        ("pair protocol fidelity", Box::new(|| protocol(&run))),
        (
            "determinism and round-trips",
            Box::new(|| determinism(&det_root)),
        ),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    if failures > 0 {
        println!("{failures} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
