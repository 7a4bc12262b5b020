//! End-to-end acceptance checks. Runs sequentially (timing criteria must not share
//! the machine with other tests) and prints one PASS/FAIL line per criterion.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use lambda_maml::episodes::{sample_episode, synth_taskspace, Episode, EpisodeSpec, SynthSpec};
use lambda_maml::maml::{adapt, adapt_params, meta_gradient, meta_objective, AdaptMode, EpisodeTask, Task};
use lambda_maml::nn::{build_cnn4, init_weights, Architecture, Cnn4Config, WeightSet};
use lambda_maml::pattern::{enumerate_patterns, LambdaPattern};
use lambda_maml::search::{best_at_one_step, select_fastest, Sweep, SweepRecord};
use lambda_maml::Result as CoreResult;
use lambda_tensor::{grad, Tape, Tensor, TensorData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 10] = [
        (1, "parameter counts", c1_parameter_counts),
        (2, "gradient oracles", c2_gradient_oracles),
        (3, "masking soundness", c3_masking_soundness),
        (4, "full-pattern reduction", c4_full_pattern_reduction),
        (5, "desk-scale learning", c5_desk_scale_learning),
        (6, "speedup", c6_speedup),
        (7, "cost-model properties", c7_cost_model),
        (8, "search procedure", c8_search),
        (9, "determinism", c9_determinism),
        (10, "chance level", c10_chance_level),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1} s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1} s] {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> std::result::Result<(), String> {
    let t = start.elapsed();
    if t > limit {
        return Err(format!("{what} took {t:?}, limit {limit:?}"));
    }
    Ok(())
}

fn p(s: &str) -> LambdaPattern {
    s.parse().unwrap()
}

fn c1_parameter_counts() -> Check {
    let start = Instant::now();
    for (n_way, linear, total) in [(2, 1_602, 30_498), (5, 4_005, 32_901)] {
        let arch = Architecture::cnn4(&Cnn4Config {
            feature_dim: Some(800),
            ..Cnn4Config::new(32, n_way, [3, 32, 32])
        })
        .map_err(|e| e.to_string())?;
        let counts = arch.layer_param_counts();
        ensure!(counts == [960, 9_312, 9_312, 9_312, linear], "{n_way}-way per-layer counts {counts:?}");
        ensure!(arch.param_count() == total, "{n_way}-way total {}", arch.param_count());
    }
    within(start, Duration::from_secs(1), "counting")?;
    Ok("960 / 9,312 x3 / 1,602 and 4,005; totals 30,498 and 32,901".into())
}

/// `Σ a_i θ_i² + Σ b_i θ_i θ_{i+1} − Σ c_i θ_i` with different coefficients for the
/// support and query losses.
struct Quadratic {
    support: [[f64; 3]; 3],
    query: [[f64; 3]; 3],
}

fn quadratic(coef: &[[f64; 3]; 3], th: &[Tensor<f64>]) -> CoreResult<Tensor<f64>> {
    let [a, b, c] = coef;
    let mut total = th[0].mul(&th[0])?.scale(a[0])?;
    for i in 0..3 {
        if i > 0 {
            total = total.add(&th[i].mul(&th[i])?.scale(a[i])?)?;
        }
        if i < 2 {
            total = total.add(&th[i].mul(&th[i + 1])?.scale(b[i])?)?;
        }
        total = total.sub(&th[i].scale(c[i])?)?;
    }
    Ok(total.sum_all()?)
}

impl Task<f64> for Quadratic {
    fn support_loss(&self, params: &[Tensor<f64>]) -> CoreResult<Tensor<f64>> {
        quadratic(&self.support, params)
    }
    fn query_loss(&self, params: &[Tensor<f64>]) -> CoreResult<(Tensor<f64>, Option<f64>)> {
        Ok((quadratic(&self.query, params)?, None))
    }
}

fn central_difference(theta: &[TensorData<f64>], f: impl Fn(&[TensorData<f64>]) -> f64) -> Vec<Vec<f64>> {
    let h = 1e-5;
    theta
        .iter()
        .enumerate()
        .map(|(t, tensor)| {
            (0..tensor.len())
                .map(|i| {
                    let at = |d: f64| {
                        let mut moved = theta.to_vec();
                        let mut v = moved[t].to_vec();
                        v[i] += d;
                        moved[t] = TensorData::new(tensor.shape(), v).unwrap();
                        f(&moved)
                    };
                    (at(h) - at(-h)) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

fn relative_error(analytic: &[TensorData<f64>], fd: &[Vec<f64>]) -> f64 {
    let (mut diff, mut scale) = (0f64, 0f64);
    for (a, f) in analytic.iter().zip(fd) {
        for (x, y) in a.as_slice().iter().zip(f) {
            diff = diff.max((x - y).abs());
            scale = scale.max(y.abs());
        }
    }
    diff / scale.max(1e-12)
}

fn toy_episode(shape: [usize; 3], seed: u64) -> Episode {
    let ds = synth_taskspace(
        &SynthSpec {
            n_classes: 4,
            shape,
            difficulty: 0.2,
            images_per_class: 8,
        },
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap();
    let spec = EpisodeSpec {
        n_way: 2,
        k_shot: 2,
        k_query: 3,
    };
    sample_episode(&ds, spec, &mut ChaCha8Rng::seed_from_u64(seed + 1)).unwrap()
}

fn c2_gradient_oracles() -> Check {
    let start = Instant::now();
    let mut worst = 0f64;

    let quad = Quadratic {
        support: [[0.7, 1.3, 0.4], [0.2, -0.5, 0.0], [0.3, -0.8, 1.1]],
        query: [[1.1, 0.6, 0.9], [-0.4, 0.3, 0.0], [-0.2, 0.5, 0.7]],
    };
    let q_theta: Vec<TensorData<f64>> = [0.5, -1.2, 0.8].iter().map(|&v| TensorData::new(&[1], vec![v]).unwrap()).collect();

    // toy conv net: one conv-block and a 4 -> 2 linear head
    let arch = Architecture::conv_net([1, 4, 4], 1, 1, 2, None).map_err(|e| e.to_string())?;
    ensure!(arch.param_count() <= 50, "toy model has {} parameters", arch.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = init_weights(&arch, &mut rng);
    let c_theta: Vec<TensorData<f64>> = w
        .data()
        .iter()
        .map(|d| {
            let v = d.as_slice().iter().map(|v| v * 20.0 + 0.1 * (rng.random::<f64>() - 0.5)).collect();
            TensorData::new(d.shape(), v).unwrap()
        })
        .collect();
    let episodes = [toy_episode([1, 4, 4], 5), toy_episode([1, 4, 4], 9)];
    let conv_tasks: Vec<EpisodeTask<'_, f64>> = episodes.iter().map(|e| EpisodeTask::new(&arch, e)).collect();

    // (tasks, θ, layer of each tensor, patterns)
    type Case<'a> = (Vec<&'a dyn Task<f64>>, &'a [TensorData<f64>], Vec<usize>, Vec<LambdaPattern>);
    let cases: Vec<Case<'_>> = vec![
        (vec![&quad], &q_theta, vec![0, 1, 2], enumerate_patterns(3)),
        (
            conv_tasks.iter().map(|t| t as &dyn Task<f64>).collect(),
            &c_theta,
            w.layer_of(),
            enumerate_patterns(2),
        ),
    ];
    for (tasks, theta, layer_of, patterns) in &cases {
        // first order: gradient of the support loss
        let tape = Tape::new();
        let vars: Vec<Tensor<f64>> = theta.iter().map(|d| tape.var(d.clone()).unwrap()).collect();
        let loss = tasks[0].support_loss(&vars).map_err(|e| e.to_string())?;
        let g = grad(&loss, &vars.iter().collect::<Vec<_>>(), false).map_err(|e| e.to_string())?;
        let g: Vec<TensorData<f64>> = g.iter().map(|t| t.data().clone()).collect();
        let fd = central_difference(theta, |th| {
            let ts: Vec<Tensor<f64>> = th.iter().cloned().map(Tensor::from).collect();
            tasks[0].support_loss(&ts).unwrap().item()
        });
        let err = relative_error(&g, &fd);
        worst = worst.max(err);
        ensure!(err <= 1e-4, "support-loss gradient: relative error {err:e}");

        // second order: meta-gradient through P adaptation steps
        let alpha = if layer_of.len() == 3 { 0.1 } else { 0.5 };
        for steps in 1..=3 {
            for pattern in patterns {
                let mg = meta_gradient(tasks, theta, layer_of, pattern, steps, alpha, false).map_err(|e| e.to_string())?;
                let fd = central_difference(theta, |th| meta_objective(tasks, th, layer_of, pattern, steps, alpha).unwrap());
                let err = relative_error(&mg.grads, &fd);
                worst = worst.max(err);
                ensure!(err <= 1e-4, "meta-gradient P={steps} {pattern}: relative error {err:e}");
            }
        }
    }
    within(start, Duration::from_secs(60), "gradient checks")?;
    Ok(format!("worst relative error {worst:.2e} over P in 1..=3, every pattern"))
}

/// Every tensor tracked, every gradient computed, inactive ones zeroed, `θ − α·g` everywhere.
fn full_backprop_then_mask(
    task: &dyn Task<f64>,
    weights: &WeightSet<f64>,
    pattern: &LambdaPattern,
    steps: usize,
    alpha: f64,
) -> Vec<TensorData<f64>> {
    let layer_of = weights.layer_of();
    let mut current = weights.data();
    for _ in 0..steps {
        let tape = Tape::new();
        let vars: Vec<Tensor<f64>> = current.iter().map(|d| tape.var(d.clone()).unwrap()).collect();
        let loss = task.support_loss(&vars).unwrap();
        let grads = grad(&loss, &vars.iter().collect::<Vec<_>>(), false).unwrap();
        current = current
            .iter()
            .zip(&grads)
            .zip(&layer_of)
            .map(|((w, g), &l)| {
                let g = if pattern.is_active(l) { g.data().clone() } else { g.data().map(|_| 0.0) };
                w.zip_map(&g, |w, g| w - alpha * g)
            })
            .collect();
    }
    current
}

fn c3_masking_soundness() -> Check {
    let start = Instant::now();
    let (arch, w) = build_cnn4(&Cnn4Config::new(4, 2, [3, 16, 16]), &mut ChaCha8Rng::seed_from_u64(3))
        .map_err(|e| e.to_string())?;
    let ep = toy_episode([3, 16, 16], 21);
    let task = EpisodeTask::new(&arch, &ep);
    let patterns = enumerate_patterns(5);
    for pattern in &patterns {
        let got = adapt(&arch, &w, &task, pattern, 10, 0.01).map_err(|e| e.to_string())?;
        let want = full_backprop_then_mask(&task, &w, pattern, 10, 0.01);
        for ((g, o), param) in got.data().iter().zip(&want).zip(w.params()) {
            ensure!(g.bit_eq(o), "{pattern}: {} differs from the masked oracle", param.name);
            if !pattern.is_active(param.layer) {
                ensure!(g.bit_eq(&param.data), "{pattern}: frozen {} moved", param.name);
            }
        }
    }
    within(start, Duration::from_secs(120), "masking checks")?;
    Ok(format!("{} patterns, P=10, bit-identical", patterns.len()))
}

fn c4_full_pattern_reduction() -> Check {
    let (arch, w) = build_cnn4(&Cnn4Config::new(4, 2, [3, 16, 16]), &mut ChaCha8Rng::seed_from_u64(4))
        .map_err(|e| e.to_string())?;
    let episodes = [toy_episode([3, 16, 16], 7), toy_episode([3, 16, 16], 8)];
    let tasks: Vec<EpisodeTask<'_, f64>> = episodes.iter().map(|e| EpisodeTask::new(&arch, e)).collect();
    let (steps, alpha) = (3, 0.01);

    // plain gradient descent on all tensors, recorded for the meta-gradient
    let tape = Tape::new();
    let vars = w.track(&tape).map_err(|e| e.to_string())?;
    let mut total: Option<Tensor<f64>> = None;
    for (i, task) in tasks.iter().enumerate() {
        let mut current = vars.clone();
        for _ in 0..steps {
            let loss = task.support_loss(&current).unwrap();
            let g = grad(&loss, &current.iter().collect::<Vec<_>>(), true).unwrap();
            current = current.iter().zip(&g).map(|(w, g)| w.sub(&g.scale(alpha).unwrap()).unwrap()).collect();
        }
        let masked = adapt(&arch, &w, task, &LambdaPattern::full(5), steps, alpha).map_err(|e| e.to_string())?;
        for (a, b) in masked.tensors().iter().zip(&current) {
            ensure!(a.data().bit_eq(b.data()), "adapted weights differ on episode {i}");
        }
        let loss = task.query_loss(&current).unwrap().0;
        total = Some(match total {
            None => loss,
            Some(t) => t.add(&loss).unwrap(),
        });
    }
    let oracle = grad(&total.unwrap(), &vars.iter().collect::<Vec<_>>(), false).unwrap();
    let dyn_tasks: Vec<&dyn Task<f64>> = tasks.iter().map(|t| t as &dyn Task<f64>).collect();
    let mg = meta_gradient(&dyn_tasks, &w.data(), &w.layer_of(), &LambdaPattern::full(5), steps, alpha, false)
        .map_err(|e| e.to_string())?;
    for (a, b) in mg.grads.iter().zip(&oracle) {
        ensure!(a.bit_eq(b.data()), "meta-gradient differs from the unmasked path");
    }
    // the inference path agrees with the second-order recording too
    let tracked = w.track(&Tape::new()).map_err(|e| e.to_string())?;
    let second =
        adapt_params(&tasks[0], &tracked, &w.layer_of(), &LambdaPattern::full(5), steps, alpha, AdaptMode::SecondOrder)
            .map_err(|e| e.to_string())?;
    let plain = adapt(&arch, &w, &tasks[0], &LambdaPattern::full(5), steps, alpha).map_err(|e| e.to_string())?;
    for (a, b) in plain.tensors().iter().zip(&second) {
        ensure!(a.data().bit_eq(b.data()), "inference and second-order adaptation differ");
    }
    Ok(format!("adapted weights and meta-gradient bit-identical at P={steps}"))
}

// CLI helpers ---------------------------------------------------------------

/// Runs the CLI with its own output root and returns the run directory.
fn cli(args: &[&str]) -> std::result::Result<(PathBuf, String), String> {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?.keep();
    cli_in(&root, args)
}

fn cli_in(root: &Path, args: &[&str]) -> std::result::Result<(PathBuf, String), String> {
    let root_s = root.to_string_lossy().to_string();
    let mut argv = vec!["lambda-maml"];
    argv.extend_from_slice(args);
    argv.extend_from_slice(&["--out-dir", &root_s]);
    let out = lambda_maml_cli::execute(argv).map_err(|e| format!("{args:?}: exit {}: {}", e.code, e.message))?;
    Ok((out.run_dir, out.summary))
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Quote-aware split of one CSV line.
fn fields(line: &str) -> Vec<String> {
    let mut out = vec![String::new()];
    let mut quoted = false;
    for c in line.chars() {
        match c {
            '"' => quoted = !quoted,
            ',' if !quoted => out.push(String::new()),
            _ => out.last_mut().unwrap().push(c),
        }
    }
    out
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().map(fields).collect()
}

fn column(rows: &[Vec<String>], name: &str) -> Vec<String> {
    let i = rows[0].iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows[1..].iter().map(|r| r[i].clone()).collect()
}

/// Drops timing columns so the rest can be compared byte for byte.
fn without_timing(text: &str) -> String {
    let timing = ["time_ms", "wall_ms", "mean_ms", "std_ms", "median_ms"];
    let rows = csv_rows(text);
    let keep: Vec<usize> = (0..rows[0].len()).filter(|&i| !timing.contains(&rows[0][i].as_str())).collect();
    rows.iter()
        .map(|r| keep.iter().map(|&i| r[i].as_str()).collect::<Vec<_>>().join("|"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn eval_mean_ci(run_dir: &Path) -> (f64, f64, usize) {
    let rows = csv_rows(&read(&run_dir.join("eval_summary.csv")));
    let get = |c: &str| column(&rows, c)[0].clone();
    (get("mean").parse().unwrap(), get("ci95").parse().unwrap(), get("episodes").parse().unwrap())
}

fn c5_desk_scale_learning() -> Check {
    let start = Instant::now();
    let common = ["--synthetic", "--n-way", "2", "--k-shot", "1", "--seed", "7", "--filters", "8", "--steps", "5"];
    let mut train_args = vec!["train", "--epochs", "30", "--val-episodes", "50"];
    train_args.extend_from_slice(&common);
    let (train_dir, _) = cli(&train_args)?;
    let ckpt = train_dir.join("model.ckpt");
    let log = read(&train_dir.join("train_log.csv"));
    ensure!(log.lines().count() == 31, "expected 30 epoch rows");
    let mut eval_args = vec!["eval", "--episodes", "400", "--checkpoint", ckpt.to_str().unwrap()];
    eval_args.extend_from_slice(&common);
    let (eval_dir, _) = cli(&eval_args)?;
    let (mean, ci, n) = eval_mean_ci(&eval_dir);
    within(start, Duration::from_secs(600), "desk-scale run")?;
    ensure!(mean >= 0.80, "held-out accuracy {mean:.4} ± {ci:.4} below 0.80");
    Ok(format!("held-out accuracy {mean:.4} ± {ci:.4} over {n} episodes (chance 0.50)"))
}

fn timing_means(run_dir: &Path) -> Vec<(String, usize, f64, usize)> {
    let rows = csv_rows(&read(&run_dir.join("timing.csv")));
    let pats = column(&rows, "pattern");
    let steps = column(&rows, "steps");
    let means = column(&rows, "mean_ms");
    let counts = column(&rows, "count");
    (0..pats.len())
        .map(|i| (pats[i].clone(), steps[i].parse().unwrap(), means[i].parse().unwrap(), counts[i].parse().unwrap()))
        .collect()
}

fn c6_speedup() -> Check {
    let (dir, _) = cli(&[
        "bench", "--synthetic", "--image-size", "32", "--filters", "32", "--n-way", "5", "--k-shot", "1",
        "--episodes", "30", "--warmup", "5", "--patterns", "1,0,1,1,1;1,1,1,1,1", "--steps", "3,10",
        "--seed", "1",
    ])?;
    let t = timing_means(&dir);
    let find = |pat: &str, steps: usize| {
        t.iter()
            .find(|(p, s, _, _)| p == pat && *s == steps)
            .map(|&(_, _, m, n)| (m, n))
            .unwrap_or_else(|| panic!("no timing for {pat} P={steps}"))
    };
    let (fast, n1) = find("1,0,1,1,1", 3);
    let (full10, n2) = find("1,1,1,1,1", 10);
    let (full3, _) = find("1,1,1,1,1", 3);
    ensure!(n1 >= 30 && n2 >= 30, "only {n1}/{n2} timed episodes");
    let speedup = full10 / fast;
    let ratio = full10 / full3;
    let detail = format!(
        "{{1,0,1,1,1}} P=3 {fast:.2} ms vs full P=10 {full10:.2} ms: speedup {speedup:.2}; full P=10/P=3 {ratio:.2}"
    );
    ensure!(speedup >= 2.0, "{detail}");
    ensure!((2.3..=4.3).contains(&ratio), "{detail}");
    Ok(detail)
}

fn c7_cost_model() -> Check {
    use lambda_maml::bench::flop_cost;
    let arch = Architecture::cnn4(&Cnn4Config::new(32, 5, [3, 32, 32])).map_err(|e| e.to_string())?;
    let patterns = enumerate_patterns(5);
    let mut pairs = 0;
    for batch in [5, 25, 80] {
        for a in &patterns {
            let one = flop_cost(&arch, batch, a, 1).map_err(|e| e.to_string())?;
            for steps in 1..=10u64 {
                let c = flop_cost(&arch, batch, a, steps as usize).map_err(|e| e.to_string())?;
                ensure!(c == steps * one, "{a} batch {batch}: cost at P={steps} is {c}, not {steps}x{one}");
            }
            for b in patterns.iter().filter(|b| a.is_subset_of(b)) {
                pairs += 1;
                let cb = flop_cost(&arch, batch, b, 1).map_err(|e| e.to_string())?;
                ensure!(one <= cb, "{a} costs {one} > {b} costs {cb}");
            }
        }
    }
    Ok(format!("{} patterns, {pairs} inclusion pairs, P in 1..=10", patterns.len()))
}

const CONFIGS: [&str; 4] = ["1-shot 2-way", "5-shot 2-way", "1-shot 5-way", "5-shot 5-way"];

fn record(steps: usize, pattern: &str, acc_pct: [f64; 4], time_ms: f64) -> SweepRecord {
    SweepRecord {
        pattern: p(pattern),
        steps,
        accuracy: acc_pct.iter().map(|a| a / 100.0).collect(),
        time_ms,
        flop_cost: steps as f64,
    }
}

fn speed_grid() -> Sweep {
    Sweep {
        configs: CONFIGS.map(String::from).to_vec(),
        records: vec![
            record(3, "0,1,1,1,1", [74.7, 83.2, 49.3, 69.7], 13.3),
            record(3, "1,0,1,1,1", [76.6, 85.9, 49.3, 69.8], 13.9),
            record(3, "1,1,1,1,1", [76.6, 87.2, 49.3, 70.0], 15.0),
            record(5, "0,1,1,1,1", [75.2, 83.9, 51.5, 69.9], 20.0),
            record(5, "1,0,1,1,1", [76.9, 86.2, 51.4, 70.1], 21.1),
            record(5, "1,1,1,1,1", [77.0, 87.4, 51.6, 70.2], 22.6),
            record(10, "0,1,1,1,1", [75.4, 84.6, 51.7, 70.1], 36.1),
            record(10, "1,0,1,1,1", [77.1, 86.6, 51.7, 70.1], 38.6),
            record(10, "1,1,1,1,1", [77.2, 87.6, 51.7, 70.3], 41.5),
        ],
    }
}

fn c8_search() -> Check {
    let sweep = speed_grid();
    let report = select_fastest(&sweep, 0.07, 10, None).map_err(|e| e.to_string())?;
    let got: Vec<(usize, String)> = report.admissible.iter().map(|r| (r.steps, r.pattern.to_string())).collect();
    let want: Vec<(usize, String)> = [3, 5, 10]
        .iter()
        .flat_map(|&s| ["0,1,1,1,1", "1,0,1,1,1", "1,1,1,1,1"].map(|p| (s, p.to_string())))
        .collect();
    ensure!(got == want, "admissible set {got:?}");
    let fastest = sweep.records.iter().map(|r| r.time_ms).fold(f64::INFINITY, f64::min);
    ensure!(report.selected.time_ms == fastest, "selected {:?}", report.selected);

    // the same search through the CLI, from a records file
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let records = dir.path().join("sweep.csv");
    fs::write(&records, sweep.to_csv().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let (run, summary) = cli(&["search", "--threshold", "0.07", "--steps", "1,3,5,10", "--records", records.to_str().unwrap()])?;
    let md = read(&run.join("search.md"));
    ensure!(md.lines().count() == 11, "search.md has {} lines", md.lines().count());
    ensure!(summary.contains("selected 0,1,1,1,1 at P=3"), "{summary}");

    let single_step = Sweep {
        configs: CONFIGS.map(String::from).to_vec(),
        records: vec![
            record(1, "1,1,1,1,1", [74.3, 86.0, 36.8, 20.4], 5.0),
            record(1, "1,1,0,1,1", [74.3, 83.1, 36.9, 53.1], 4.0),
        ],
    };
    let best = best_at_one_step(&single_step).map_err(|e| e.to_string())?;
    let five = best.iter().find(|b| b.config == "5-shot 5-way").ok_or("no 5-shot 5-way entry")?;
    ensure!(five.record.pattern == p("1,1,0,1,1"), "5-shot 5-way picked {}", five.record.pattern);
    Ok(format!(
        "9 admissible, selected {} at P={} (speedup {:.2}); single step 5-shot 5-way picks {}",
        report.selected.pattern, report.selected.steps, report.speedup, five.record.pattern
    ))
}

fn c9_determinism() -> Check {
    let data = ["--synthetic", "--synth-classes", "12", "--synth-split", "6,3,3", "--synth-images", "20", "--seed", "5"];
    let small = ["--filters", "4", "--n-way", "2", "--k-shot", "1", "--k-query", "5"];
    let with = |extra: &[&str]| -> Vec<String> {
        extra.iter().chain(&data).chain(&small).map(|s| s.to_string()).collect()
    };
    let twice = |args: Vec<String>| -> std::result::Result<(PathBuf, PathBuf), String> {
        let a: Vec<&str> = args.iter().map(String::as_str).collect();
        let root = tempfile::tempdir().map_err(|e| e.to_string())?.keep();
        Ok((cli_in(&root, &a)?.0, cli_in(&root, &a)?.0))
    };
    let mut compared = 0;
    let mut same = |a: &Path, b: &Path, file: &str, strip: bool| -> std::result::Result<(), String> {
        let (x, y) = (fs::read(a.join(file)).map_err(|e| e.to_string())?, fs::read(b.join(file)).map_err(|e| e.to_string())?);
        let equal = if strip {
            without_timing(&String::from_utf8_lossy(&x)) == without_timing(&String::from_utf8_lossy(&y))
        } else {
            x == y
        };
        compared += 1;
        if equal { Ok(()) } else { Err(format!("{file} differs between runs")) }
    };

    let (t1, t2) = twice(with(&["train", "--epochs", "2", "--tasks-per-epoch", "4", "--meta-batch", "2", "--val-episodes", "4", "--steps", "2"]))?;
    same(&t1, &t2, "model.ckpt", false)?;
    same(&t1, &t2, "train_log.csv", true)?;
    same(&t1, &t2, "config.toml", false)?;

    // re-running from the resolved config reproduces the checkpoint
    let cfg = t1.join("config.toml");
    let (t3, _) = cli(&["train", "--config", cfg.to_str().unwrap()])?;
    same(&t1, &t3, "model.ckpt", false)?;

    let ckpt = t1.join("model.ckpt");
    let (e1, e2) = twice(with(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "10", "--steps", "2"]))?;
    same(&e1, &e2, "eval.csv", false)?;
    same(&e1, &e2, "eval_summary.csv", false)?;

    let (s1, s2) = twice(with(&["sweep", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "3", "--patterns", "full;0,1,1,1,1;0,0,0,0,1", "--steps", "1,2", "--warmup", "0"]))?;
    same(&s1, &s2, "sweep.csv", true)?;
    same(&s1, &s2, "best_one_step.csv", true)?;

    let records = s1.join("sweep.csv");
    let (r1, r2) = twice(with(&["search", "--records", records.to_str().unwrap(), "--steps", "1,2", "--reference-steps", "2", "--threshold", "0.5"]))?;
    for f in ["sweep.csv", "search.csv", "search.md", "best_one_step.csv", "long.csv", "summary.md"] {
        same(&r1, &r2, f, false)?;
    }
    let (p1, p2) = twice(with(&["report", "--records", records.to_str().unwrap(), "--reference-steps", "2"]))?;
    same(&p1, &p2, "search.csv", false)?;

    let (b1, b2) = twice(with(&["bench", "--episodes", "3", "--warmup", "0", "--patterns", "trivial", "--steps", "1"]))?;
    same(&b1, &b2, "timing.csv", true)?;
    Ok(format!("{compared} files identical across repeated train/eval/sweep/search/report/bench runs"))
}

fn c10_chance_level() -> Check {
    let mut details = Vec::new();
    for (n_way, chance) in [(5usize, 0.20), (2, 0.50)] {
        let n = n_way.to_string();
        let common = ["--synthetic", "--difficulty", "1.0", "--n-way", n.as_str(), "--k-shot", "1", "--seed", "0"];
        let mut train_args = vec!["train", "--epochs", "0"];
        train_args.extend_from_slice(&common);
        let (dir, _) = cli(&train_args)?;
        let ckpt = dir.join("model.ckpt");
        let mut eval_args = vec!["eval", "--episodes", "400", "--checkpoint", ckpt.to_str().unwrap()];
        eval_args.extend_from_slice(&common);
        let (eval_dir, _) = cli(&eval_args)?;
        let (mean, ci, episodes) = eval_mean_ci(&eval_dir);
        let line = format!("{n_way}-way {mean:.4} ± {ci:.4} ({episodes} episodes)");
        ensure!(episodes == 400, "{line}");
        ensure!((mean - chance).abs() <= ci, "{line} excludes {chance}");
        details.push(line);
    }
    Ok(details.join("; "))
}
