//! Acceptance checks. Each test writes one `PASS`/`FAIL` line straight to
//! stderr, so the lines show up even when test output is captured.
//!
//! Tests hold a shared lock so timings are not disturbed by each other.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use quan::bench::{bench_conv, BenchCase, Variant, MIN_REPEATS, SELF_CHECK_TOLERANCE};
use quan::data::{synth_orientation_classes, synth_oriented_with, write_cifar10_file, ImageRecord, SynthConfig};
use quan::engine::registry::{registry, run_all};
use quan::engine::{train_epochs, MetricsSink, OptimizerKind, TrainConfig};
use quan::layers::reference::{full_hamilton_reference, separable_reference};
use quan::layers::{init_weights, iqbn_forward, qconv2d_forward, ConvMode, ConvSpec, InitScheme, Iqbn, QConvParams};
use quan::mapping::{map_image, map_rgb_poincare, unmap_poincare};
use quan::models::{count_params, ClassifierConfig, OrientationConfig, OrientationNet, OrientedSet, QuanClassifier};
use quan::quaternion::hamilton_product;
use quan::{MappingStrategy, QTensor, Quaternion, Real, Shape, Q};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    // Bypasses libtest's capture of print!/eprint!.
    let _ = writeln!(std::io::stderr(), "{verdict} [{id:>2}] {title}: {detail}");
}

fn random_quaternion(rng: &mut ChaCha8Rng) -> Quaternion {
    Quaternion::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    )
}

fn max_abs_diff(a: Quaternion, b: Quaternion) -> f64 {
    a.to_array().iter().zip(b.to_array()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn quan_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_quan"))
}

#[test]
fn c01_algebra() {
    let _g = serial();
    let start = Instant::now();
    let (one, i, j, k) = (Quaternion::IDENTITY, Quaternion::I, Quaternion::J, Quaternion::K);
    let minus_one = Quaternion::new(-1.0, 0.0, 0.0, 0.0);
    let h = hamilton_product;
    let table = [
        (h(i, i), minus_one),
        (h(j, j), minus_one),
        (h(k, k), minus_one),
        (h(h(i, j), k), minus_one),
        (h(i, j), k),
        (h(j, k), i),
        (h(k, i), j),
        (h(j, i), k.scale(-1.0)),
        (h(k, j), i.scale(-1.0)),
        (h(i, k), j.scale(-1.0)),
    ];
    let mut units_exact = table.iter().all(|(got, want)| got == want);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut norm_err, mut assoc_err) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let (p, q, r) = (random_quaternion(&mut rng), random_quaternion(&mut rng), random_quaternion(&mut rng));
        units_exact &= h(one, p) == p && h(p, one) == p;
        norm_err = norm_err.max((h(p, q).norm() - p.norm() * q.norm()).abs());
        assoc_err = assoc_err.max(max_abs_diff(h(h(p, q), r), h(p, h(q, r))));
    }
    let elapsed = start.elapsed();
    let pass = units_exact && norm_err < 1e-12 && assoc_err < 1e-12 && elapsed < Duration::from_secs(5);
    report(
        1,
        "quaternion algebra",
        pass,
        &format!(
            "unit laws exact={units_exact}, norm err {norm_err:.1e}, assoc err {assoc_err:.1e} (< 1e-12) over 1e4 cases in {elapsed:.2?} (< 5 s)"
        ),
    );
    assert!(pass);
}

/// Largest deviation relative to the reference's largest magnitude.
fn rel_dev<T: Real>(got: &QTensor<T>, want: &QTensor<f64>) -> f64 {
    assert_eq!(got.dims(), want.dims());
    let scale = want.data().iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    got.data()
        .iter()
        .zip(want.data())
        .fold(0.0f64, |m, (x, y)| m.max((x.to_f64() - y).abs()))
        / scale
}

fn to_f32(t: &QTensor<f64>) -> QTensor<f32> {
    QTensor::from_vec(t.dims(), t.data().iter().map(|&v| v as f32).collect()).unwrap()
}

#[test]
fn c02_conv_oracles() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = 16;
    let (mut full64, mut full32, mut sep64, mut sep32) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let k = rng.random_range(1..=3usize) * 2 - 1;
        let input = Shape::new(
            rng.random_range(1..=3),
            rng.random_range(1..=4),
            rng.random_range(k..=k + 6),
            rng.random_range(k..=k + 6),
        );
        let spec = ConvSpec::new(input.channels, rng.random_range(1..=4), k)
            .stride(rng.random_range(1..=2))
            .padding(rng.random_range(0..=k / 2 + 1));
        let w: Vec<f64> = init_weights(spec.weight_dims(), InitScheme::ComponentHe, &mut rng);
        let b: Vec<f64> = (0..spec.bias_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data = (0..input.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = QTensor::from_vec(input.dims(), data).unwrap();
        let (w32, b32): (Vec<f32>, Vec<f32>) = (w.iter().map(|&v| v as f32).collect(), b.iter().map(|&v| v as f32).collect());
        let x32 = to_f32(&x);
        // The oracles see exactly the values the f32 kernel sees.
        let x_round = QTensor::from_vec(input.dims(), x32.data().iter().map(|&v| v as f64).collect()).unwrap();
        let (w_round, b_round): (Vec<f64>, Vec<f64>) = (w32.iter().map(|&v| v as f64).collect(), b32.iter().map(|&v| v as f64).collect());

        for (mode, acc64, acc32) in [
            (ConvMode::FullHamilton, &mut full64, &mut full32),
            (ConvMode::Separable, &mut sep64, &mut sep32),
        ] {
            let s = spec.mode(mode);
            let oracle = |x: &QTensor<f64>, p: &QConvParams<'_, f64>| match mode {
                ConvMode::FullHamilton => full_hamilton_reference(x, p).unwrap(),
                ConvMode::Separable => separable_reference(x, p).unwrap(),
            };
            let p = QConvParams::new(s, &w, Some(&b)).unwrap();
            *acc64 = acc64.max(rel_dev(&qconv2d_forward(&x, &p).unwrap(), &oracle(&x, &p)));
            let p_round = QConvParams::new(s, &w_round, Some(&b_round)).unwrap();
            let p32 = QConvParams::new(s, &w32, Some(&b32)).unwrap();
            *acc32 = acc32.max(rel_dev(&qconv2d_forward(&x32, &p32).unwrap(), &oracle(&x_round, &p_round)));
        }
    }
    let elapsed = start.elapsed();
    let pass = full64.max(full32) < 1e-5 && sep64.max(sep32) < 1e-6 && elapsed < Duration::from_secs(30);
    report(
        2,
        "convolution oracles",
        pass,
        &format!(
            "{cases} cases; full vs nested-loop oracle {:.1e} (f64) {:.1e} (f32) (< 1e-5); separable vs direct {:.1e} (f64) {:.1e} (f32) (< 1e-6); {elapsed:.2?} (< 30 s)",
            full64, full32, sep64, sep32
        ),
    );
    assert!(pass);
}

#[test]
fn c03_gradients() {
    let _g = serial();
    let start = Instant::now();
    let expected = [
        "qconv_separable",
        "qconv_full_hamilton",
        "iqbn",
        "silu",
        "relu",
        "qprelu",
        "qmaxpool",
        "qsppf",
        "qc3k2",
        "qc2psa",
        "cls_softmax",
        "cls_bce",
        "ciou",
        "angular",
        "reg",
        "smooth",
        "total",
    ];
    let names: Vec<&str> = registry().iter().map(|c| c.name).collect();
    let missing: Vec<&&str> = expected.iter().filter(|n| !names.contains(n)).collect();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for seed in [0, 7] {
        for row in run_all(seed) {
            worst = worst.max(row.max_rel_error);
            if !row.passed() {
                failures.push(format!("{}@{seed}", row.name));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = missing.is_empty() && failures.is_empty() && elapsed < Duration::from_secs(300);
    report(
        3,
        "finite-difference gradients",
        pass,
        &format!(
            "{} cases x 2 seeds, worst relative error {worst:.1e} (< 1e-6), failing {failures:?}, missing {missing:?}, {elapsed:.1?} (< 5 min)",
            names.len()
        ),
    );
    assert!(pass);
}

#[test]
fn c04_iqbn_statistics() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = Shape::new(4, 3, 8, 8);
    assert!(shape.batch * shape.plane() >= 256);
    let mut x = QTensor::<f64>::zeros(shape);
    // Each (channel, component) gets its own offset and spread.
    let offsets: Vec<(f64, f64)> = (0..shape.channels * Q)
        .map(|_| (rng.random_range(-5.0..5.0), rng.random_range(0.5..4.0)))
        .collect();
    let plane = shape.plane() * Q;
    for (n, v) in x.data_mut().iter_mut().enumerate() {
        let c = (n / plane) % shape.channels;
        let (mu, s) = offsets[c * Q + n % Q];
        *v = mu + s * rng.random_range(-1.0..1.0);
    }
    let mut layer = Iqbn::<f64>::new("bn", shape.channels);
    let y = iqbn_forward(&x, &mut layer, true).unwrap();
    // gamma = 1 and beta = 0 at initialization, so this is the pre-affine output.
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for slot in 0..shape.channels * Q {
        let (c, q) = (slot / Q, slot % Q);
        let vals: Vec<f64> = (0..shape.batch)
            .flat_map(|b| y.plane(b, c).iter().skip(q).step_by(Q).copied().collect::<Vec<_>>())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        worst_mean = worst_mean.max(mean.abs());
        worst_var = worst_var.max((var - 1.0).abs());
    }
    let pass = worst_mean < 1e-5 && worst_var < 1e-3;
    report(
        4,
        "IQBN statistics",
        pass,
        &format!(
            "B*H*W = {}, worst |mean| {worst_mean:.1e} (< 1e-5), worst |var - 1| {worst_var:.1e} (< 1e-3)",
            shape.batch * shape.plane()
        ),
    );
    assert!(pass);
}

#[test]
fn c05_mapping() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut unit_err, mut trip_err) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let rgb = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let q = map_rgb_poincare(rgb).unwrap();
        unit_err = unit_err.max((q.norm() - 1.0).abs());
        let back = unmap_poincare(q).unwrap();
        trip_err = trip_err.max(back.iter().zip(rgb).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())));
    }
    // The f32 image path over every 8-bit level of each channel.
    let pixels: Vec<u8> = (0..=255u8).flat_map(|v| [v, 255 - v, v / 2]).collect();
    let img: QTensor<f32> = map_image(&pixels, 1, 256, MappingStrategy::Poincare).unwrap();
    let img_unit_err = img
        .data()
        .chunks_exact(Q)
        .map(|c| (c.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0f64, f64::max);
    let black = map_rgb_poincare([0.0; 3]).unwrap();
    let black_exact = black.to_array() == [1.0, 0.0, 0.0, 0.0];
    let pass = unit_err < 1e-6 && img_unit_err < 1e-6 && trip_err < 1e-6 && black_exact;
    report(
        5,
        "Poincaré mapping",
        pass,
        &format!(
            "unit err {unit_err:.1e} (f64) {img_unit_err:.1e} (f32 image) (< 1e-6), round trip {trip_err:.1e} (< 1e-6) over 1e4 triples, black -> {:?}",
            black.to_array()
        ),
    );
    assert!(pass);
}

#[test]
fn c06_complexity() {
    let _g = serial();
    let case = BenchCase::square(1, 32, 64, 3);
    let name = case.name.clone();
    let r = bench_conv(&[case], MIN_REPEATS, 6).unwrap();
    let mults = r.mult_ratio(&name).unwrap();
    let time = r.time_ratio(&name, Variant::FullHamilton, Variant::Separable).unwrap();
    let check = r.rows.iter().map(|row| row.self_check).fold(0.0f64, f64::max);
    let pass = mults == 4.0 && time > 2.0 && check <= SELF_CHECK_TOLERANCE;
    report(
        6,
        "separable complexity",
        pass,
        &format!(
            "{name}: multiply ratio {mults} (= 4), median time ratio {time:.2} (> 2.0) over {MIN_REPEATS} runs, fused vs multi-pass {check:.1e} (<= 1e-6)"
        ),
    );
    assert!(pass);
}

#[test]
fn c07_parameter_accounting() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = QuanClassifier::<f32>::new(ClassifierConfig::default(), &mut rng).unwrap();
    let c = count_params(&net.params());
    // A lone layer: 16 -> 16 quaternion channels, 3x3, against a 64 -> 64 real conv.
    let spec = ConvSpec::new(16, 16, 3);
    let layer_weights: usize = spec.weight_dims().iter().product();
    let real_weights = 64 * 64 * 3 * 3;
    let pass = c.conv_weights * 4 == c.conv_real_equivalent && layer_weights * 4 == real_weights;
    report(
        7,
        "parameter accounting",
        pass,
        &format!(
            "default classifier: {} conv weights vs {} real-equivalent (ratio {}), {} parameters in total; single 3x3 layer {layer_weights} vs {real_weights}",
            c.conv_weights,
            c.conv_real_equivalent,
            c.conv_ratio(),
            c.total
        ),
    );
    assert!(pass);
}

fn write_cifar_fixture(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let as_records = |n, seed| -> Vec<ImageRecord> {
        synth_orientation_classes(n, seed, 32, 10).unwrap().records
    };
    write_cifar10_file(&dir.join("data_batch_1.bin"), &as_records(64, 80)).unwrap();
    write_cifar10_file(&dir.join("test_batch.bin"), &as_records(32, 81)).unwrap();
}

fn last_eval_accuracy(metrics: &str) -> Option<f64> {
    metrics
        .lines()
        .rfind(|l| l.split(',').nth(1) == Some("eval"))?
        .split(',')
        .nth(3)?
        .parse()
        .ok()
}

#[test]
fn c08_desk_classification() {
    let _g = serial();
    let recipe = workspace_root().join("configs/cifar10_desk.cfg");
    let tmp = tempfile::tempdir().unwrap();

    // Deterministic mode: two single-threaded runs of the recipe on a small
    // CIFAR-format fixture must write identical metrics.
    let fixture = tmp.path().join("fixture");
    write_cifar_fixture(&fixture);
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = quan_bin()
            .arg("train")
            .arg("--config")
            .arg(&recipe)
            .arg("--data")
            .arg(&fixture)
            .args(["--epochs", "2", "--threads", "1", "--seed", "3", "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        files.push(fs::read(out.join("metrics.csv")).unwrap());
    }
    let identical = files[0] == files[1];

    // The accuracy target needs the real dataset.
    let accuracy = std::env::var_os("QUAN_CIFAR10_DIR").map(|dir| {
        let out = tmp.path().join("cifar");
        let start = Instant::now();
        let o = quan_bin()
            .arg("train")
            .arg("--config")
            .arg(&recipe)
            .arg("--data")
            .arg(&dir)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
        (last_eval_accuracy(&metrics).unwrap(), start.elapsed())
    });

    match accuracy {
        Some((acc, elapsed)) => {
            let pass = identical && acc >= 0.55 && elapsed <= Duration::from_secs(2 * 3600);
            report(
                8,
                "desk-scale CIFAR-10",
                pass,
                &format!(
                    "top-1 {:.2}% (>= 55%) after 20 epochs on 10k images in {elapsed:.0?} (<= 2 h); repeat run byte-identical={identical}",
                    100.0 * acc
                ),
            );
            assert!(pass);
        }
        None => {
            // Not measured: reported as a failure, not asserted, so the
            // determinism half still gates the suite.
            report(
                8,
                "desk-scale CIFAR-10",
                false,
                &format!(
                    "accuracy NOT MEASURED (CIFAR-10 absent; set QUAN_CIFAR10_DIR to the binary batches); repeat run byte-identical={identical}"
                ),
            );
            assert!(identical);
        }
    }
}

#[test]
fn c09_orientation() {
    let _g = serial();
    let start = Instant::now();
    let synth = SynthConfig::new(24).half_turn();
    let train = OrientedSet::<f32>::from_samples(&synth_oriented_with(2000, 1, &synth).unwrap(), MappingStrategy::Poincare).unwrap();
    let eval = OrientedSet::<f32>::from_samples(&synth_oriented_with(500, 2, &synth).unwrap(), MappingStrategy::Poincare).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 32,
        optimizer: OptimizerKind::AdamW,
        base_lr: 3e-3,
        record_time: false,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = OrientationNet::<f32>::new(OrientationConfig { width: 4, ..Default::default() }, &mut rng).unwrap();
    let before = net.mean_angular_error(&eval, 100).unwrap();
    train_epochs(&mut net, &train, None, &cfg, &mut MetricsSink::memory()).unwrap();
    let after = net.mean_angular_error(&eval, 100).unwrap();
    let pass = after < 0.30;
    report(
        9,
        "orientation learning",
        pass,
        &format!(
            "held-out mean angular loss {before:.3} -> {after:.3} rad (< 0.30) on 500 samples, theta in [0, pi), 30 epochs, {:.0?}",
            start.elapsed()
        ),
    );
    assert!(pass);
}

#[test]
fn c10_ablation_grid() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ablation");
    let o = quan_bin()
        .arg("ablate")
        .arg("--config")
        .arg(workspace_root().join("configs/ablation_synthetic.cfg"))
        .args(["--epochs", "2", "--threads", "1", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut cells: Vec<String> = fs::read_dir(out.join("cells"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    cells.sort();
    let mut expected = Vec::new();
    for m in ["poincare", "luminance", "mean_brightness", "raw_normalized", "hamilton"] {
        for a in ["silu", "relu", "qprelu"] {
            expected.push(format!("{m}_{a}.csv"));
        }
    }
    expected.sort();
    let ranking = fs::read_to_string(out.join("ranking.csv")).unwrap();
    let ranks: Vec<usize> = ranking.lines().skip(1).filter_map(|l| l.split(',').next()?.parse().ok()).collect();
    let stdout = String::from_utf8_lossy(&o.stdout);
    let pass = cells == expected && ranks == (1..=15).collect::<Vec<_>>() && stdout.contains("mapping ranking");
    report(
        10,
        "ablation grid",
        pass,
        &format!("{} of 15 mapping x activation cells written, ranking rows {}", cells.len(), ranks.len()),
    );
    assert!(pass);
}
