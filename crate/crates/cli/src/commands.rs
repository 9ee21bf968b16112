//! The subcommands as library functions, so tests can drive them in-process.

use std::hint::black_box;
use std::path::{Path, PathBuf};
use std::time::Instant;

use flowmamba_core::isu::UpdateKind;
use flowmamba_core::pipeline::{
    generate_scene, train_step, FlowMambaModel, SceneRef, SceneSpec, TrainState, TransformFamily,
};
use flowmamba_core::pointcloud::{evaluate, MetricsReport};
use flowmamba_core::ssm::{
    causal_convolve, materialize_kernel, scan_parallel, scan_sequential, ContinuousSsm, ScanParams,
};
use flowmamba_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{write_text, RunConfig};
use crate::error::{CliError, Result};
use crate::files::{load_checkpoint, read_scene_dir, render_scene, write_checkpoint, write_csv, SceneFile};

#[derive(Debug, Clone)]
pub struct GenOptions {
    pub out: PathBuf,
    pub seed: u64,
    pub count: usize,
    pub objects: usize,
    pub points_per_object: usize,
    /// Transform family name, see [`TransformFamily::parse`].
    pub transform: String,
    pub noise: f64,
    pub occlusion: f64,
    pub extent: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        let spec = SceneSpec::default();
        GenOptions {
            out: PathBuf::from("scenes"),
            seed: 0,
            count: 1,
            objects: spec.objects,
            points_per_object: spec.points_per_object,
            transform: "rigid".into(),
            noise: spec.noise,
            occlusion: spec.occlusion,
            extent: spec.extent,
        }
    }
}

/// Writes `scene_0000.txt`, ... with seeds `seed`, `seed + 1`, ... and the
/// generator settings as `gen.cfg`. Returns the scene paths.
pub fn gen(opts: &GenOptions) -> Result<Vec<PathBuf>> {
    let spec = SceneSpec {
        objects: opts.objects,
        points_per_object: opts.points_per_object,
        family: TransformFamily::parse(&opts.transform)?,
        noise: opts.noise,
        occlusion: opts.occlusion,
        extent: opts.extent,
    };
    let mut paths = Vec::with_capacity(opts.count);
    for i in 0..opts.count {
        let scene = generate_scene(&spec, opts.seed + i as u64)?;
        let path = opts.out.join(format!("scene_{i:04}.txt"));
        write_text(&path, &render_scene(&scene))?;
        paths.push(path);
    }
    let cfg = format!(
        "seed = {}\ncount = {}\nobjects = {}\npoints_per_object = {}\ntransform = {}\nnoise = {}\nocclusion = {}\nextent = {}\n",
        opts.seed, opts.count, opts.objects, opts.points_per_object, opts.transform, opts.noise, opts.occlusion, opts.extent
    );
    write_text(&opts.out.join("gen.cfg"), &cfg)?;
    Ok(paths)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    /// 1-based.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Trains from scratch on `scenes`, cycling through them in order,
/// `batch` scenes per step.
pub fn train_model(config: &RunConfig, scenes: &[SceneFile], mut on_step: impl FnMut(LogRow)) -> Result<TrainState> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(CliError::Usage("no training scenes".into()));
    }
    let model = FlowMambaModel::new(config.network.clone())?;
    let mut state = TrainState::new(model, config.train.clone())?;
    let batch = config.train.batch;
    for step in 0..config.train.total_steps {
        let refs: Vec<SceneRef<'_>> = (0..batch)
            .map(|j| {
                let s = &scenes[(step as usize * batch + j) % scenes.len()];
                SceneRef {
                    source: &s.source,
                    target: &s.target,
                    flow: &s.flow,
                    seed: s.seed,
                }
            })
            .collect();
        let lr = state.lr();
        let loss = train_step(&mut state, &refs)?;
        on_step(LogRow {
            step: step + 1,
            lr,
            loss,
        });
    }
    Ok(state)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub scenes: PathBuf,
    pub out: PathBuf,
    pub config: RunConfig,
}

/// Writes `checkpoint.bin`, `train_log.csv` and `config.cfg` into `out`.
pub fn train(opts: &TrainOptions) -> Result<Vec<LogRow>> {
    opts.config.validate()?;
    let scenes = read_scene_dir(&opts.scenes)?;
    write_text(&opts.out.join("config.cfg"), &opts.config.render())?;
    let mut log = Vec::new();
    let state = train_model(&opts.config, &scenes, |row| log.push(row))?;
    write_checkpoint(&opts.out.join("checkpoint.bin"), &state.model.params)?;
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|r| vec![r.step.to_string(), r.lr.to_string(), r.loss.to_string()])
        .collect();
    write_csv(&opts.out.join("train_log.csv"), &["step", "lr", "loss"], &rows)?;
    Ok(log)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub scene_id: String,
    pub iteration: usize,
    pub metrics: MetricsReport,
}

/// Metrics after `1..=iters` update iterations, each from its own forward
/// pass.
pub fn eval_model(model: &FlowMambaModel, scenes: &[SceneFile], iters: usize) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::with_capacity(scenes.len() * iters);
    for scene in scenes {
        for n in 1..=iters {
            let pred = model.predict(&scene.source, &scene.target, n)?;
            rows.push(MetricsRow {
                scene_id: scene.id.clone(),
                iteration: n,
                metrics: evaluate(&pred, &scene.flow)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub scenes: PathBuf,
    pub out: PathBuf,
    pub config: RunConfig,
    /// Defaults to the configured iteration count.
    pub iters: Option<usize>,
}

/// Writes `metrics.csv` and `config.cfg` into `out`.
pub fn eval(opts: &EvalOptions) -> Result<Vec<MetricsRow>> {
    opts.config.validate()?;
    let mut model = FlowMambaModel::new(opts.config.network.clone())?;
    load_checkpoint(&opts.checkpoint, &mut model.params)?;
    let scenes = read_scene_dir(&opts.scenes)?;
    let iters = opts.iters.unwrap_or(opts.config.network.iters);
    if iters == 0 {
        return Err(CliError::Usage("--iters must be at least 1".into()));
    }
    write_text(&opts.out.join("config.cfg"), &opts.config.render())?;
    let rows = eval_model(&model, &scenes, iters)?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let m = r.metrics;
            vec![
                r.scene_id.clone(),
                r.iteration.to_string(),
                m.epe3d.to_string(),
                m.acc3ds.to_string(),
                m.acc3dr.to_string(),
                m.outliers.to_string(),
            ]
        })
        .collect();
    write_csv(
        &opts.out.join("metrics.csv"),
        &["scene_id", "iteration", "epe3d", "acc3ds", "acc3dr", "outliers"],
        &csv_rows,
    )?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct AblateOptions {
    pub scenes: PathBuf,
    pub out: PathBuf,
    pub config: RunConfig,
    pub variants: Vec<UpdateKind>,
    /// Network initialization seeds.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: UpdateKind,
    pub seed: u64,
    /// Mean over the scenes.
    pub epe3d: f64,
}

/// Trains every variant with every seed on the same scenes and budget, then
/// evaluates on those scenes.
pub fn ablate_scenes(
    config: &RunConfig,
    scenes: &[SceneFile],
    variants: &[UpdateKind],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let mut cfg = config.clone();
            cfg.network.update = variant;
            cfg.network.seed = seed;
            let state = train_model(&cfg, scenes, |_| {})?;
            let iters = cfg.network.iters;
            let mut sum = 0.0;
            for s in scenes {
                let pred = state.model.predict(&s.source, &s.target, iters)?;
                sum += evaluate(&pred, &s.flow)?.epe3d;
            }
            rows.push(AblationRow {
                variant,
                seed,
                epe3d: sum / scenes.len() as f64,
            });
        }
    }
    Ok(rows)
}

/// Mean EPE3D over seeds for `variant`.
pub fn variant_mean(rows: &[AblationRow], variant: UpdateKind) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(|r| r.epe3d).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Writes `ablation.csv` (per seed, then a `mean` row per variant) and
/// `config.cfg`.
pub fn ablate(opts: &AblateOptions) -> Result<Vec<AblationRow>> {
    opts.config.validate()?;
    if opts.variants.is_empty() || opts.seeds.is_empty() {
        return Err(CliError::Usage("need at least one variant and one seed".into()));
    }
    let scenes = read_scene_dir(&opts.scenes)?;
    write_text(&opts.out.join("config.cfg"), &opts.config.render())?;
    let rows = ablate_scenes(&opts.config, &scenes, &opts.variants, &opts.seeds)?;
    let mut csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.variant.name().into(), r.seed.to_string(), r.epe3d.to_string()])
        .collect();
    for &v in &opts.variants {
        let mean = variant_mean(&rows, v).expect("variant was run");
        csv_rows.push(vec![v.name().into(), "mean".into(), mean.to_string()]);
    }
    write_csv(&opts.out.join("ablation.csv"), &["variant", "seed", "epe3d"], &csv_rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchKernel {
    Sequential,
    Parallel,
    KernelConvolution,
}

impl BenchKernel {
    pub const ALL: [BenchKernel; 3] = [
        BenchKernel::Sequential,
        BenchKernel::Parallel,
        BenchKernel::KernelConvolution,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchKernel::Sequential => "sequential",
            BenchKernel::Parallel => "parallel",
            BenchKernel::KernelConvolution => "kernel-convolution",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub lengths: Vec<usize>,
    pub states: Vec<usize>,
    pub repeats: usize,
    pub channels: usize,
    pub seed: u64,
    /// CSV destination; nothing is written when `None`.
    pub out: Option<PathBuf>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            lengths: vec![256, 512, 1024, 2048, 4096],
            states: vec![4, 16],
            repeats: 5,
            channels: 4,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kernel: BenchKernel,
    pub len: usize,
    pub state: usize,
    /// Median time per lane-step (one sequence position of one channel and
    /// state entry).
    pub ns_per_element: f64,
    /// Against the sequential scan.
    pub max_abs_diff: f64,
}

/// Largest disagreement with the sequential scan that the bench accepts.
pub const BENCH_TOLERANCE: f64 = 1e-9;

/// Smallest wall time of one timed sample; short kernels run in a loop.
const MIN_SAMPLE_NS: f64 = 1e6;

fn run_kernel(kernel: BenchKernel, params: ScanParams<'_>, x: &Tensor) -> Result<Tensor> {
    Ok(match kernel {
        BenchKernel::Sequential => scan_sequential(params, x, None)?,
        BenchKernel::Parallel => scan_parallel(params, x, None)?,
        BenchKernel::KernelConvolution => causal_convolve(&materialize_kernel(params, x.rows())?, x)?,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times the three scan implementations on random stable time-invariant
/// systems. Fails with a cross-check error as soon as one disagrees with
/// the sequential scan by [`BENCH_TOLERANCE`] or more.
pub fn bench(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if opts.repeats < 3 {
        return Err(CliError::Usage("--repeats must be at least 3".into()));
    }
    if opts.lengths.contains(&0) || opts.states.contains(&0) || opts.channels == 0 {
        return Err(CliError::Usage("lengths, states and channels must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let d = opts.channels;
    let mut rows = Vec::new();
    for &s in &opts.states {
        for &len in &opts.lengths {
            let lanes = d * s;
            let a = (0..lanes).map(|_| -rng.random_range(0.1..1.0)).collect();
            let b = (0..lanes).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = (0..lanes).map(|_| rng.random_range(-1.0..1.0)).collect();
            let delta: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..0.1)).collect();
            let ssm = ContinuousSsm::new(d, s, a, b, c)?.discretize(&delta)?;
            let params = ScanParams::TimeInvariant(&ssm);
            let x = Tensor::uniform(&[len, d], -1.0, 1.0, &mut rng);
            let reference = scan_sequential(params, &x, None)?;
            for kernel in BenchKernel::ALL {
                let y = run_kernel(kernel, params, &x)?;
                let diff = y.max_abs_diff(&reference);
                if !(diff < BENCH_TOLERANCE) {
                    return Err(CliError::CrossCheck {
                        kernel: kernel.name().into(),
                        len,
                        state: s,
                        diff,
                    });
                }
                let t0 = Instant::now();
                black_box(run_kernel(kernel, params, black_box(&x))?);
                let once = t0.elapsed().as_nanos().max(1) as f64;
                let inner = (MIN_SAMPLE_NS / once).ceil().max(1.0) as usize;
                let mut samples = Vec::with_capacity(opts.repeats);
                for _ in 0..opts.repeats {
                    let t0 = Instant::now();
                    for _ in 0..inner {
                        black_box(run_kernel(kernel, params, black_box(&x))?);
                    }
                    samples.push(t0.elapsed().as_nanos() as f64 / inner as f64);
                }
                rows.push(BenchRow {
                    kernel,
                    len,
                    state: s,
                    ns_per_element: median(samples) / (len * lanes) as f64,
                    max_abs_diff: diff,
                });
            }
        }
    }
    if let Some(out) = &opts.out {
        let csv_rows: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.kernel.name().into(),
                    r.len.to_string(),
                    r.state.to_string(),
                    format!("{:.4}", r.ns_per_element),
                    format!("{:e}", r.max_abs_diff),
                ]
            })
            .collect();
        write_csv(out, &["kernel", "L", "S", "ns_per_element", "max_abs_diff"], &csv_rows)?;
    }
    Ok(rows)
}

/// Resolves a run configuration: defaults, then the file, then `--set`
/// pairs in order.
pub fn resolve_config(file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(f) = file {
        cfg.apply_file(f)?;
    }
    for pair in sets {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}
