//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion on stderr (uncaptured) and then asserts it.
//!
//! The learning experiments (criteria 7 to 9) share one set of training
//! runs. All tests take a global lock so timings are not disturbed by each
//! other.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use malleable25d::analysis::{assignment_histogram, mean_rf_width};
use malleable25d::cli;
use malleable25d::convops::{
    conv2d_forward, depthaware_forward, estimate_flops, hard25d_forward, malleable_forward, LayerDescriptor, LayerKind,
};
use malleable25d::geometry::DepthField;
use malleable25d::oracle::gradcheck::{self, GradcheckConfig, RandomInstance};
use malleable25d::oracle::{naive_forward, OracleOp};
use malleable25d::rfield::{assignment_weights, rebalance, RFieldParams, T_MIN};
use malleable25d::synth::{Dataset, Regime, SceneConfig, Split};
use malleable25d::tensor::Tensor4;
use malleable25d::train::{evaluate, fit, FreezeSet, NetConfig, ToyNet, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "acceptance criterion {criterion:>2} [{name}]: {status}  {detail}");
}

#[test]
fn criterion_01_gradient_suite() {
    let _g = serial();
    let start = Instant::now();
    let cfg = GradcheckConfig::default();
    assert!(cfg.trials >= 100 && cfg.max_batch <= 2 && cfg.max_channels <= 4 && cfg.max_spatial <= 9);
    assert_eq!(cfg.kernels, vec![1, 3, 5]);
    let rep = gradcheck::run(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = rep.passed() && secs < 120.0;
    report(
        1,
        "gradient suite",
        pass,
        &format!("{} trials, worst rel err {:.2e} (< 1e-6), {secs:.1}s (< 120s)", rep.trials, rep.worst()),
    );
    assert!(pass, "{rep}");
}

#[test]
fn criterion_02_oracle_suite() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 4];
    let instances = 60;
    for i in 0..instances {
        let kernels = [1, 3, 5][i % 3];
        let inst = RandomInstance::draw(&mut rng, kernels, 2, 4, 9);
        let alpha = rng.gen_range(0.5..10.0);

        let fast = conv2d_forward(&inst.x, &inst.banks[0], Some(&inst.bias), &inst.spec).unwrap();
        let slow = naive_forward(
            OracleOp::Standard {
                weights: &inst.banks[0],
                bias: Some(&inst.bias),
                spec: &inst.spec,
            },
            &inst.x,
        )
        .unwrap();
        worst[0] = worst[0].max(fast.max_abs_diff(&slow).unwrap());

        let p = inst.malleable();
        let fast = malleable_forward(&inst.x, &inst.depth, &inst.camera, &p).unwrap();
        let slow = naive_forward(
            OracleOp::Malleable {
                params: &p,
                depth: &inst.depth,
                camera: &inst.camera,
            },
            &inst.x,
        )
        .unwrap();
        worst[1] = worst[1].max(fast.max_abs_diff(&slow).unwrap());

        let p = inst.depthaware(alpha);
        let fast = depthaware_forward(&inst.x, &inst.depth, &p).unwrap();
        let slow = naive_forward(
            OracleOp::DepthAware {
                params: &p,
                depth: &inst.depth,
            },
            &inst.x,
        )
        .unwrap();
        worst[2] = worst[2].max(fast.max_abs_diff(&slow).unwrap());

        let p = inst.hard25d();
        let fast = hard25d_forward(&inst.x, &inst.depth, &inst.camera, &p).unwrap();
        let slow = naive_forward(
            OracleOp::Hard25D {
                params: &p,
                depth: &inst.depth,
                camera: &inst.camera,
            },
            &inst.x,
        )
        .unwrap();
        worst[3] = worst[3].max(fast.max_abs_diff(&slow).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|&w| w <= 1e-10) && secs < 60.0;
    report(
        2,
        "oracle suite",
        pass,
        &format!(
            "{instances} instances per operator, max abs diff standard {:.1e} malleable {:.1e} depth-aware {:.1e} hard {:.1e} (<= 1e-10), {secs:.1}s (< 60s)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    );
    assert!(pass);
}

fn random_rfield(rng: &mut ChaCha8Rng, sorted: bool) -> RFieldParams {
    let k = rng.gen_range(1..=5);
    let mut a: Vec<f64> = (0..k + 2).map(|_| rng.gen_range(-6.0..6.0)).collect();
    if sorted {
        a.sort_by(f64::total_cmp);
    }
    let t = if sorted {
        10f64.powf(rng.gen_range(-2.0..1.0))
    } else {
        T_MIN * 10f64.powf(rng.gen_range(0.0..5.0))
    };
    let b = (0..k).map(|_| rng.gen_range(-20.0..20.0)).collect();
    RFieldParams::new(a, t, b).unwrap()
}

#[test]
fn criterion_03_normalization() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 1_000_000;
    let (mut worst_g, mut worst_s) = (0.0f64, 0.0f64);
    for _ in 0..draws {
        let p = random_rfield(&mut rng, false);
        let d = if rng.gen_bool(0.8) {
            rng.gen_range(-20.0..20.0)
        } else {
            rng.gen_range(-1e4..1e4)
        };
        let g = assignment_weights(d, &p);
        assert_eq!(g.len(), p.kernels() + 2);
        worst_g = worst_g.max((g.iter().sum::<f64>() - 1.0).abs());
        worst_s = worst_s.max((rebalance(&p.b).iter().sum::<f64>() - 1.0).abs());
    }
    let pass = worst_g <= 1e-12 && worst_s <= 1e-12;
    report(
        3,
        "normalization",
        pass,
        &format!("{draws} draws, max |sum g - 1| {worst_g:.1e}, max |sum s - 1| {worst_s:.1e} (<= 1e-12)"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_constant_depth_collapse() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = [0.0f64; 3];
    let instances = 60;
    for i in 0..instances {
        let kernels = [1, 3, 5][i % 3];
        let inst = RandomInstance::draw(&mut rng, kernels, 2, 4, 9);
        let [n, _, h, w] = inst.depth.depth().dims();
        let z = rng.gen_range(0.5..50.0);
        let depth = DepthField::new(Tensor4::full([n, 1, h, w], z).unwrap(), inst.depth.rate()).unwrap();

        let p = inst.malleable();
        let y = malleable_forward(&inst.x, &depth, &inst.camera, &p).unwrap();
        let merged = conv2d_forward(&inst.x, &p.merged_kernel(0.0), Some(&inst.bias), &inst.spec).unwrap();
        worst[0] = worst[0].max(y.max_abs_diff(&merged).unwrap());

        let y = hard25d_forward(&inst.x, &depth, &inst.camera, &inst.hard25d()).unwrap();
        let mid = conv2d_forward(&inst.x, &inst.banks[kernels / 2], Some(&inst.bias), &inst.spec).unwrap();
        worst[1] = worst[1].max(y.max_abs_diff(&mid).unwrap());

        let y = depthaware_forward(&inst.x, &depth, &inst.depthaware(rng.gen_range(0.5..10.0))).unwrap();
        let std = conv2d_forward(&inst.x, &inst.banks[0], Some(&inst.bias), &inst.spec).unwrap();
        worst[2] = worst[2].max(y.max_abs_diff(&std).unwrap());
    }
    let pass = worst.iter().all(|&w| w <= 1e-10);
    report(
        4,
        "constant-depth collapse",
        pass,
        &format!(
            "{instances} instances, malleable vs merged {:.1e}, hard vs middle bank {:.1e}, depth-aware vs standard {:.1e} (<= 1e-10)",
            worst[0], worst[1], worst[2]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_parameter_accounting() {
    let _g = serial();
    let desc = |kind, kernels| LayerDescriptor {
        kind,
        kernels,
        c_in: 256,
        c_out: 256,
        kh: 3,
        kw: 3,
        out_h: 60,
        out_w: 80,
        bias: false,
    };
    let mut overheads = Vec::new();
    for k in 1..=8usize {
        let m = estimate_flops(&desc(LayerKind::Malleable, k)).params();
        let h = estimate_flops(&desc(LayerKind::Hard25D, k)).params();
        overheads.push((k, m as i64 - h as i64));
    }
    let exact = overheads.iter().all(|&(k, o)| o == 2 * k as i64 + 3);
    let m = estimate_flops(&desc(LayerKind::Malleable, 3)).total_ops() as f64;
    let h = estimate_flops(&desc(LayerKind::Hard25D, 3)).total_ops() as f64;
    let rel = (m - h) / h;
    let pass = exact && rel.abs() < 1e-3;
    report(
        5,
        "parameter accounting",
        pass,
        &format!(
            "overhead vs hard 2.5D for K=1..8: {:?} (2K+3), ops overhead at K=3 {:.4}% (< 0.1%)",
            overheads.iter().map(|o| o.1).collect::<Vec<_>>(),
            100.0 * rel
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_rfield_invariants() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (draws, points) = (100, 10_000);
    let mut failures = Vec::new();
    for draw in 0..draws {
        let p = loop {
            let p = random_rfield(&mut rng, true);
            if p.a.windows(2).all(|w| w[0] < w[1]) {
                break p;
            }
        };
        let classes = p.classes();
        for k in 1..classes - 1 {
            let g = assignment_weights(p.a[k], &p);
            if (0..classes).any(|j| j != k && g[j] >= g[k]) {
                failures.push(format!("draw {draw}: center of kernel {k} not dominant"));
            }
        }
        let (lo, hi) = (p.a[0] - 4.0, p.a[classes - 1] + 4.0);
        let mut prev: Option<Vec<f64>> = None;
        for i in 0..points {
            let d = lo + (hi - lo) * i as f64 / (points - 1) as f64;
            let g = assignment_weights(d, &p);
            if let Some(q) = &prev {
                if g[0] > q[0] || g[classes - 1] < q[classes - 1] {
                    failures.push(format!("draw {draw}: border class not monotone at d = {d}"));
                    break;
                }
            }
            prev = Some(g);
        }
    }
    let pass = failures.is_empty();
    report(
        6,
        "rfield invariants",
        pass,
        &format!("{draws} draws x {points} grid points, {} violations", failures.len()),
    );
    assert!(pass, "{failures:?}");
}

// ---------------------------------------------------------------------------
// desk-scale learning experiments

const SEEDS: [u64; 3] = [0, 1, 2];
const ITERATIONS: usize = 2000;

fn scenes(seed: u64, regime: Regime, noise: f64) -> SceneConfig {
    SceneConfig {
        scenes: 640,
        test_fraction: 0.2,
        min_objects: 3,
        max_objects: 5,
        min_size: 5,
        max_size: 10,
        regime,
        noise_sigma: noise,
        seed,
        ..SceneConfig::default()
    }
}

fn net(kind: LayerKind, seed: u64) -> NetConfig {
    NetConfig {
        kind,
        kernels: 3,
        blocks: 5,
        strided: vec![1],
        duplicate_banks: true,
        seed,
        ..NetConfig::default()
    }
}

fn schedule(seed: u64, freeze: FreezeSet) -> TrainConfig {
    TrainConfig {
        iterations: ITERATIONS,
        rfield_lr_mult: 10.0,
        freeze,
        log_every: ITERATIONS,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone)]
struct RunResult {
    pixel_acc: f64,
    rf_width: f64,
    raw_entropy: f64,
    rebalanced_entropy: f64,
}

fn train_run(data: &Dataset, kind: LayerKind, seed: u64, freeze: FreezeSet) -> RunResult {
    let res = fit(ToyNet::build(&net(kind, seed)).unwrap(), data, &schedule(seed, freeze)).unwrap();
    let eval = evaluate(&res.net, data, Split::Test, 16).unwrap();
    let (raw_entropy, rebalanced_entropy) = match res.net.malleable_blocks().last() {
        Some((last, _)) => {
            let h = assignment_histogram(&res.net, data, Split::Test, *last).unwrap();
            (h.raw_entropy(), h.rebalanced_entropy())
        }
        None => (f64::NAN, f64::NAN),
    };
    RunResult {
        pixel_acc: eval.pixel_acc,
        rf_width: mean_rf_width(&res.net),
        raw_entropy,
        rebalanced_entropy,
    }
}

struct Experiments {
    malleable: Vec<RunResult>,
    frozen: Vec<RunResult>,
    standard: Vec<RunResult>,
    comparison_secs: f64,
    noisy: Vec<RunResult>,
}

fn experiments() -> &'static Experiments {
    static CELL: OnceLock<Experiments> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let (mut malleable, mut frozen, mut standard) = (Vec::new(), Vec::new(), Vec::new());
        for seed in SEEDS {
            let data = Dataset::from_config(&scenes(seed, Regime::Indoor, 0.0)).unwrap();
            assert!(data.split(Split::Train).len() >= 512 && data.split(Split::Test).len() >= 128);
            malleable.push(train_run(&data, LayerKind::Malleable, seed, FreezeSet::NONE));
            frozen.push(train_run(&data, LayerKind::Malleable, seed, FreezeSet::ALL));
            standard.push(train_run(&data, LayerKind::Standard, seed, FreezeSet::NONE));
        }
        let comparison_secs = start.elapsed().as_secs_f64();
        let noisy = SEEDS
            .iter()
            .map(|&seed| {
                let data = Dataset::from_config(&scenes(seed, Regime::Outdoor, 0.5)).unwrap();
                train_run(&data, LayerKind::Malleable, seed, FreezeSet::NONE)
            })
            .collect();
        Experiments {
            malleable,
            frozen,
            standard,
            comparison_secs,
            noisy,
        }
    })
}

fn mean(runs: &[RunResult], f: impl Fn(&RunResult) -> f64) -> f64 {
    runs.iter().map(f).sum::<f64>() / runs.len() as f64
}

fn per_seed(runs: &[RunResult], f: impl Fn(&RunResult) -> f64) -> String {
    runs.iter().map(|r| format!("{:.4}", f(r))).collect::<Vec<_>>().join("/")
}

#[test]
fn criterion_07_learning_experiment() {
    let _g = serial();
    let e = experiments();
    let acc = |r: &RunResult| r.pixel_acc;
    let (m, f, s) = (mean(&e.malleable, acc), mean(&e.frozen, acc), mean(&e.standard, acc));
    let pass = m - s >= 0.10 && m - f > 0.0 && e.comparison_secs < 1800.0;
    report(
        7,
        "desk-scale learning",
        pass,
        &format!(
            "mean test pixel acc malleable {m:.4} ({}), frozen {f:.4} ({}), standard {s:.4} ({}); margin vs standard {:+.2} points (>= 10), vs frozen {:+.2} points (> 0); {:.0}s (< 1800s)",
            per_seed(&e.malleable, acc),
            per_seed(&e.frozen, acc),
            per_seed(&e.standard, acc),
            100.0 * (m - s),
            100.0 * (m - f),
            e.comparison_secs
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_receptive_field_adaptation() {
    let _g = serial();
    let e = experiments();
    let width = |r: &RunResult| r.rf_width;
    let (sharp, noisy) = (mean(&e.malleable, width), mean(&e.noisy, width));
    let pass = noisy > sharp;
    report(
        8,
        "receptive-field adaptation",
        pass,
        &format!(
            "mean learned width outdoor noisy {noisy:.4} ({}) vs indoor sharp {sharp:.4} ({})",
            per_seed(&e.noisy, width),
            per_seed(&e.malleable, width)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_rebalancing_effect() {
    let _g = serial();
    let e = experiments();
    let raw = mean(&e.malleable, |r| r.raw_entropy);
    let rebalanced = mean(&e.malleable, |r| r.rebalanced_entropy);
    let pass = rebalanced >= raw;
    report(
        9,
        "rebalancing effect",
        pass,
        &format!(
            "final malleable block, mean entropy rebalanced {rebalanced:.4} ({}) vs raw {raw:.4} ({})",
            per_seed(&e.malleable, |r| r.rebalanced_entropy),
            per_seed(&e.malleable, |r| r.raw_entropy)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// reproducibility

fn m25d(args: &[&str]) -> i32 {
    let mut full = vec!["m25d"];
    full.extend_from_slice(args);
    cli::run(full)
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

#[test]
fn criterion_10_reproducibility() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let path = |p: &str| -> String { root.join(p).to_string_lossy().into_owned() };
    let data = path("data/manifest.txt");
    let ck = path("train-a/checkpoint");
    let scene = ["--set", "scene.height=12", "--set", "scene.width=12", "--set", "scene.scenes=10"];
    let tiny_train = [
        "--set",
        "train.iterations=6",
        "--set",
        "train.batch=2",
        "--set",
        "train.log_every=2",
        "--set",
        "net.blocks=2",
        "--set",
        "net.channels=3",
        "--set",
        "net.strided=1",
    ];

    let data_set = format!("data.manifest={data}");
    let ck_hist = format!("hist.checkpoint={ck}");
    let ck_dump = format!("dump.checkpoint={ck}");
    let ck_rf = format!("rf.checkpoint={ck}");
    let mut commands: Vec<(&str, Vec<String>)> = Vec::new();
    let owned = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    commands.push(("synth", owned(&scene)));
    let mut train = owned(&tiny_train);
    train.extend(["--set".into(), data_set.clone()]);
    commands.push(("train", train.clone()));
    commands.push(("ablate", train));
    commands.push(("gradcheck", owned(&["--set", "gradcheck.trials=4", "--seed", "7"])));
    commands.push(("export-rf", vec!["--set".into(), ck_rf]));
    commands.push(("assign-hist", vec!["--set".into(), ck_hist, "--set".into(), data_set.clone()]));
    commands.push(("dump-features", vec!["--set".into(), ck_dump, "--set".into(), data_set]));
    commands.push(("budget", owned(&["--set", "budget.kernels=5"])));

    let mut mismatches = Vec::new();
    let mut files = 0;
    for (cmd, args) in &commands {
        let mut trees = Vec::new();
        for run in ["a", "b"] {
            let out = if *cmd == "synth" && run == "a" {
                path("data")
            } else {
                path(&format!("{cmd}-{run}"))
            };
            let mut argv = vec![*cmd, "--out", &out];
            argv.extend(args.iter().map(String::as_str));
            let code = m25d(&argv);
            assert_eq!(code, cli::EXIT_OK, "m25d {argv:?}");
            trees.push(read_tree(Path::new(&out)));
        }
        files += trees[0].len();
        if trees[0] != trees[1] {
            mismatches.push(cmd.to_string());
        }
    }
    let pass = mismatches.is_empty();
    report(
        10,
        "reproducibility",
        pass,
        &format!(
            "{} subcommands run twice, {files} output files compared byte for byte, mismatches: {mismatches:?}",
            commands.len()
        ),
    );
    assert!(pass);
}
