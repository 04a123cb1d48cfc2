//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use maniqa::data::{synth_generate, Dataset, SynthConfig};
use maniqa::gradcheck::{random_input, GradCheck};
use maniqa::harness::ablate::{MODULE_SWEEP, SCALE_SWEEP};
use maniqa::harness::gradsuite::{registered_cases, run_suite};
use maniqa::harness::{ablate, evaluate, predict, run_protocol, train, visualize, ModelPredictor, SweepParam, TrainConfig};
use maniqa::metrics::{plcc, rank, srocc};
use maniqa::model::backbone::FeatureMap;
use maniqa::model::head::aggregate;
use maniqa::model::sstb::{sstb_forward, stl_forward};
use maniqa::model::tab::{init_tab, tab_forward};
use maniqa::model::window::{cyclic_shift, cyclic_unshift, window_partition, window_reverse};
use maniqa::model::{Maniqa, ModelConfig, SstbParams, TabTemperature};
use maniqa::{Ctx, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let report = run_suite(&registered_cases(), &GradCheck::default()).map_err(|e| e.to_string())?;
    let worst = report.worst().expect("non-empty suite");
    let failed: Vec<&str> = report.reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    check(
        report.passed && report.seconds < 60.0,
        format!(
            "{} cases, worst {} rel err {:.2e} (< 1e-4), {:.1}s (< 60s){}",
            report.reports.len(),
            worst.op,
            worst.max_rel_error,
            report.seconds,
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
        ),
    )
}

fn aggregate_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut oracle_err, mut scale_err, mut bound_violations) = (0.0f64, 0.0f64, 0);
    for _ in 0..1000 {
        let n = rng.random_range(1..=64);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..1.0)).collect();
        let q = aggregate(&s, &w).map_err(|e| e.to_string())?;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            num += w[i] * s[i];
            den += w[i];
        }
        oracle_err = oracle_err.max((q - num / den).abs());
        let lambda = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled: Vec<f64> = w.iter().map(|v| v * lambda).collect();
        scale_err = scale_err.max((aggregate(&s, &scaled).map_err(|e| e.to_string())? - q).abs());
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if q < lo || q > hi {
            bound_violations += 1;
        }
    }
    check(
        oracle_err < 1e-12 && scale_err < 1e-12 && bound_violations == 0,
        format!("1000 pairs: oracle err {oracle_err:.1e}, scaling err {scale_err:.1e} (< 1e-12), {bound_violations} bound violations"),
    )
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn metric_oracle() -> Outcome {
    let truth = [0.3, 1.7, -0.4, 2.2, 0.9, 5.0];
    let perms = permutations(6);
    let mut rank_err = 0.0f64;
    for p in &perms {
        let pred: Vec<f64> = p.iter().map(|&i| i as f64).collect();
        let r = srocc(&truth, &pred).map_err(|e| e.to_string())?;
        rank_err = rank_err.max((r - pearson(&rank(&truth), &rank(&pred))).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
    let base = plcc(&x, &y).map_err(|e| e.to_string())?;
    let mut affine_err = 0.0f64;
    for _ in 0..1000 {
        let a = 10f64.powf(rng.random_range(-3.0..3.0)) * if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let b = rng.random_range(-100.0..100.0);
        let mapped: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let r = plcc(&x, &mapped).map_err(|e| e.to_string())?;
        affine_err = affine_err.max((r - base.copysign(a)).abs());
    }
    check(
        perms.len() == 720 && rank_err < 1e-12 && affine_err < 1e-9,
        format!(
            "{} permutations: closed form vs Pearson-of-ranks err {rank_err:.1e} (< 1e-12); 1000 affine maps: err {affine_err:.1e}",
            perms.len()
        ),
    )
}

fn sstb_block(scale: f64) -> SstbParams {
    SstbParams {
        prefix: "sstb".into(),
        channels: 8,
        heads: 2,
        window: 2,
        mlp_hidden: 8,
        scale,
        relative_bias: true,
    }
}

fn structural_invariants() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let mut round_trips = 0;
    for (h, w, win, c) in [(4, 4, 2, 3), (6, 8, 2, 1), (9, 6, 3, 2), (8, 8, 4, 5)] {
        let g = random_input(&[h, w, c], (h * w) as u64);
        let back = window_reverse(&window_partition(&g, win).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let shifted = cyclic_shift(&g, win / 2).map_err(|e| e.to_string())?;
        let unshifted = cyclic_unshift(&shifted, win / 2).map_err(|e| e.to_string())?;
        ok &= back == g && unshifted == g;
        round_trips += 1;
    }
    notes.push(format!("{round_trips} partition/shift round trips bit-exact: {ok}"));

    let (c, n) = (8, 16);
    let mut store = ParamStore::new();
    init_tab(&mut store, "tab", c, &mut ChaCha8Rng::seed_from_u64(3));
    let x0 = random_input(&[c, n], 11);
    let run = |x: &Tensor| {
        let mut ctx = Ctx::new(&store, false);
        let v = ctx.g.constant(x.clone());
        let out = tab_forward(&mut ctx, "tab", FeatureMap { var: v, channels: c, h: 4, w: 4 }, TabTemperature::SqrtTokens)
            .expect("tab forward");
        ctx.g.value(out.out.var).to_vec()
    };
    let base = run(&x0);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut tab_err = 0.0f64;
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permute = |v: &[f64]| -> Vec<f64> { (0..c).flat_map(|ch| perm.iter().map(move |&t| v[ch * n + t])).collect() };
        let out = run(&Tensor::new(vec![c, n], permute(x0.values())).expect("shape"));
        for (a, b) in out.iter().zip(permute(&base)) {
            tab_err = tab_err.max((a - b).abs());
        }
    }
    ok &= tab_err < 1e-12;
    notes.push(format!("TAB equivariance err {tab_err:.1e} over 100 perms"));

    let p = sstb_block(0.0);
    let mut store = ParamStore::new();
    p.init(&mut store, &mut ChaCha8Rng::seed_from_u64(4));
    let x0 = random_input(&[16, 8], 5);
    let mut ctx = Ctx::new(&store, false);
    let x = ctx.g.constant(x0.clone());
    let y = sstb_forward(&mut ctx, &p, x, 4, 4).map_err(|e| e.to_string())?;
    let identity = ctx.g.value(y) == x0.values();
    ok &= identity;
    notes.push(format!("sstb(scale 0) identity bit-exact: {identity}"));

    let mut row_err = 0.0f64;
    let row_dev = |values: &[f64], width: usize| {
        values
            .chunks(width)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    };
    let p = sstb_block(0.1);
    let mut store = ParamStore::new();
    p.init(&mut store, &mut ChaCha8Rng::seed_from_u64(5));
    let mut ctx = Ctx::new(&store, false);
    let x = ctx.g.constant(random_input(&[36, 8], 6));
    for layer in 0..2 {
        let out = stl_forward(&mut ctx, &p, x, 6, 6, layer).map_err(|e| e.to_string())?;
        row_err = row_err.max(row_dev(ctx.g.value(out.attn), 4));
    }
    let model = Maniqa::new(ModelConfig::default()).map_err(|e| e.to_string())?;
    let params = model.init_params(2);
    let mut ctx = Ctx::new(&params, false);
    let img = ctx.g.constant(random_input(&[3, 32, 32], 3));
    let out = model.forward(&mut ctx, img).map_err(|e| e.to_string())?;
    for map in &out.tab_maps {
        let width = ctx.g.shape(*map)[1];
        row_err = row_err.max(row_dev(ctx.g.value(*map), width));
    }
    ok &= row_err < 1e-6;
    notes.push(format!("attention row-sum err {row_err:.1e} (< 1e-6)"));
    check(ok, notes.join("; "))
}

fn sanity_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        lr: 3e-4,
        epochs: 150,
        seeds: vec![0],
        test_crops: 20,
        ..TrainConfig::default()
    };
    cfg.lr_schedule.t_max = 150;
    cfg
}

fn shuffled_labels(train: &Dataset, seed: u64) -> Dataset {
    let mut out = train.clone();
    let mut mos: Vec<f64> = out.manifest.items.iter().map(|i| i.mos).collect();
    mos.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (item, m) in out.manifest.items.iter_mut().zip(mos) {
        item.mos = m;
    }
    out
}

fn training_sanity() -> Outcome {
    let data = synth_generate(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let cfg = sanity_config();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let start = Instant::now();
    let real = run_protocol(&cfg, &data).map_err(|e| e.to_string())?.report;
    let secs = start.elapsed().as_secs_f64();
    let control = evaluate(&cfg, &data, |seed, train_side| {
        let out = train(&cfg, &shuffled_labels(train_side, 0x5eed), seed)?;
        ModelPredictor::from_checkpoint(&out.checkpoint)
    })
    .map_err(|e| e.to_string())?;
    let s = real.mean_srocc.unwrap_or(f64::NAN);
    let sc = control.mean_srocc.unwrap_or(f64::NAN);
    let cpu_minutes = secs * threads as f64 / 60.0;
    check(
        s >= 0.8 && sc.abs() < 0.3 && cpu_minutes <= 10.0,
        format!(
            "{} items, {} held out: SROCC {s:.3} (>= 0.8), PLCC {:.3}; shuffled-label control SROCC {sc:.3} (|.| < 0.3); \
             {secs:.0}s on {threads} thread(s) = {cpu_minutes:.1} CPU-min (<= 10)",
            data.len(),
            real.seeds[0].test_items,
            real.mean_plcc.unwrap_or(f64::NAN)
        ),
    )
}

fn micro_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig::micro(),
        lr: 1e-3,
        epochs: 2,
        batch_size: 4,
        crop_size: 16,
        seeds: vec![0, 1],
        test_crops: 2,
        ..TrainConfig::default()
    }
}

fn micro_data() -> Result<Dataset, String> {
    synth_generate(&SynthConfig {
        num_refs: 5,
        distortions_per_ref: 4,
        image_size: 20,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())
}

fn ablation_mechanics() -> Outcome {
    let data = micro_data()?;
    let base = micro_config();
    let mut notes = Vec::new();
    let mut ok = true;
    for (param, values) in [("modules", &MODULE_SWEEP), ("scale", &SCALE_SWEEP)] {
        let values: Vec<String> = values.iter().map(|s| s.to_string()).collect();
        let table = ablate(&base, param, &values, &data).map_err(|e| e.to_string())?;
        let shared = table
            .rows
            .iter()
            .all(|r| r.report.seeds.iter().map(|s| s.seed).eq(base.seeds.iter().copied()));
        let defined = table.rows.iter().filter(|r| r.report.mean_srocc.is_some()).count();
        ok &= table.rows.len() == values.len() && shared;
        notes.push(format!("{param}: {} rows, shared seeds {shared}, {defined} with defined means", table.rows.len()));
    }
    let cfg = SweepParam::EnableDualBranch.apply(&base, "false").map_err(|e| e.to_string())?;
    let ck = train(&cfg, &data, 0).map_err(|e| e.to_string())?.checkpoint;
    let p = ModelPredictor::from_checkpoint(&ck).map_err(|e| e.to_string())?;
    let mut exact = true;
    for img in &data.images {
        let pred = predict(&p, img, 1, 0).map_err(|e| e.to_string())?.first_crop;
        let mean = pred.scores.iter().sum::<f64>() / pred.scores.len() as f64;
        exact &= pred.score == mean;
    }
    ok &= exact;
    notes.push(format!("dual branch off: q = mean(s) exactly on {} images: {exact}", data.len()));
    check(ok, notes.join("; "))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_maniqa"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("maniqa {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(root: &Path) -> Result<(), String> {
    let s = |p: &Path| p.to_str().expect("utf-8 path").to_string();
    let data = root.join("data");
    let run = root.join("run");
    let maps = root.join("maps");
    let config = root.join("config.json");
    let cfg = micro_config();
    std::fs::write(&config, serde_json::to_string(&cfg).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    cli(&["synth-data", "--refs", "5", "--per-ref", "4", "--size", "20", "--seed", "3", "--out", &s(&data)])?;
    let manifest = data.join("manifest.csv");
    cli(&["train", "--config", &s(&config), "--manifest", &s(&manifest), "--out", &s(&run)])?;
    cli(&["evaluate", "--config", &s(&config), "--manifest", &s(&manifest), "--checkpoint", &s(&run), "--out", &s(&run)])?;
    let image = data.join("ref000_000_gaussian_blur.ppm");
    let ck = run.join("checkpoint_seed0.json");
    cli(&["visualize", "--checkpoint", &s(&ck), "--image", &s(&image), "--out", &s(&maps)])
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    pipeline(a.path())?;
    pipeline(b.path())?;
    let files = [
        "run/checkpoint_seed0.json",
        "run/checkpoint_seed1.json",
        "run/losses_seed0.json",
        "run/losses_seed1.json",
        "run/report.json",
        "run/report.txt",
        "maps/weight_map.pgm",
        "maps/score_map.pgm",
        "maps/final_map.pgm",
        "maps/maps.json",
        "data/manifest.csv",
    ];
    let mut differing = Vec::new();
    for f in files {
        let x = std::fs::read(a.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        if x != y {
            differing.push(f);
        }
    }
    check(
        differing.is_empty(),
        format!("{} artifacts of two CLI runs compared byte-for-byte, differing: {:?}", files.len(), differing),
    )
}

fn pgm_dims(path: &Path) -> Result<(usize, usize), String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    let header = String::from_utf8_lossy(&bytes[..bytes.len().min(32)]).to_string();
    let mut parts = header.split_whitespace();
    if parts.next() != Some("P5") {
        return Err(format!("{} is not a binary PGM", path.display()));
    }
    let mut num = || parts.next().and_then(|t| t.parse().ok()).ok_or("bad PGM header".to_string());
    Ok((num()?, num()?))
}

fn visualization_contract() -> Outcome {
    let data = micro_data()?;
    let ck = train(&micro_config(), &data, 0).map_err(|e| e.to_string())?.checkpoint;
    let p = ModelPredictor::from_checkpoint(&ck).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let side = ck.config.model.image_size / ck.config.model.patch_size;
    let mut ok = true;
    let (mut product_err, mut weight_range) = (0.0f64, (f64::INFINITY, f64::NEG_INFINITY));
    for (i, img) in data.images.iter().enumerate().step_by(5) {
        let out = dir.path().join(format!("img{i}"));
        let (maps, files) = visualize(&p, img, &out).map_err(|e| e.to_string())?;
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&files.sidecar).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        for key in ["weights", "scores", "weighted"] {
            ok &= sidecar[key].as_array().map(|a| a.len()) == Some(side * side);
        }
        for f in [&files.weight, &files.score, &files.weighted] {
            ok &= pgm_dims(f)? == (side, side);
        }
        for k in 0..maps.weights.len() {
            product_err = product_err.max((maps.weighted[k] - maps.weights[k] * maps.scores[k]).abs());
            weight_range = (weight_range.0.min(maps.weights[k]), weight_range.1.max(maps.weights[k]));
        }
    }
    ok &= product_err < 1e-12 && weight_range.0 > 0.0 && weight_range.1 < 1.0;
    check(
        ok,
        format!(
            "{side}x{side} = {} entries per map; |final - w*s| {product_err:.1e} (< 1e-12); weights in [{:.4}, {:.4}] within (0, 1)",
            side * side,
            weight_range.0,
            weight_range.1
        ),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("weighted-aggregation oracle", aggregate_oracle),
        ("metric oracle", metric_oracle),
        ("structural invariants", structural_invariants),
        ("training sanity", training_sanity),
        ("ablation mechanics", ablation_mechanics),
        ("determinism", determinism),
        ("visualization contract", visualization_contract),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {}. {name}: {detail} ({:.1}s)", i + 1, start.elapsed().as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
