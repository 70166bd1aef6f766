//! Adam optimizer, the separation training loop and the repeated-run
//! uncertainty harness.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::std_map;
use crate::config::{Precision, SeparationConfig};
use crate::error::{config_err, Error, Result};
use crate::imaging::{destandardize, export_display, save_raw, standardize, ImagePlane, NormalizationRecord};
use crate::model::{total_loss, DdipModel, LossBreakdown, LossInputs};
use crate::nn::Parameter;
use crate::phantom::{score, PhantomBundle, SeparationMetrics};
use crate::rng::{NetSlot, RunSeed};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step_count: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step_count: 0,
        }
    }

    pub fn for_parameters(lr: f64, params: &[&mut Parameter<T>]) -> Self {
        AdamState::new(lr, params.iter().map(|p| p.value.len()))
    }
}

/// One Adam update of every parameter from its accumulated gradient, which
/// is then zeroed. A non-finite gradient aborts before anything changes.
pub fn adam_step<T: Real>(params: &mut [&mut Parameter<T>], state: &mut AdamState<T>, epoch: usize) -> Result<()> {
    assert_eq!(params.len(), state.m.len(), "optimizer built for a different parameter list");
    if let Some(p) = params.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFiniteGradient { epoch, param: p.name.clone() });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - state.beta1), T::lit(1.0 - state.beta2));
    let c1 = T::lit(1.0 - state.beta1.powi(t));
    let c2 = T::lit(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::lit(state.lr), T::lit(state.eps));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.zero_grad();
    }
    Ok(())
}

/// Everything a run directory records about a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: SeparationConfig,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub parameter_count: usize,
    pub normalization: [NormalizationRecord; 2],
    /// One entry per epoch, epoch 1 first.
    pub losses: Vec<LossBreakdown>,
    pub alpha1: f64,
    pub alpha2: f64,
    pub wall_time_s: f64,
    pub outputs: BTreeMap<String, PathBuf>,
    pub metrics: Option<SeparationMetrics>,
}

impl RunReport {
    /// Copy with the fields that legitimately differ between reruns (wall
    /// time and output locations) cleared.
    pub fn reproducible_part(&self) -> RunReport {
        RunReport { wall_time_s: 0.0, outputs: BTreeMap::new(), ..self.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Report plus the de-standardized images of a finished run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub y1: ImagePlane,
    pub y2: ImagePlane,
    pub i1: ImagePlane,
    pub i2: ImagePlane,
}

/// Options that control side effects of a run but not its result.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Write outputs, checkpoints and the report here.
    pub out_dir: Option<PathBuf>,
    /// Ground truth for scoring, when known.
    pub truth: Option<PhantomBundle>,
}

pub const REPORT_FILE: &str = "report.json";
pub const LOSS_FILE: &str = "losses.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Train a DDIP on `(i1_obs, i2_obs)` and return the separated slices.
///
/// `cfg.seed` must be set (see [`SeparationConfig::ensure_seed`]).
pub fn run_separation(
    cfg: &SeparationConfig,
    i1_obs: &ImagePlane,
    i2_obs: &ImagePlane,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => separate::<f32>(cfg, i1_obs, i2_obs, opts),
        Precision::F64 => separate::<f64>(cfg, i1_obs, i2_obs, opts),
    }
}

fn to_tensor<T: Real>(img: &ImagePlane) -> Tensor<T> {
    Tensor::new(vec![1, img.height, img.width], img.pixels.iter().map(|&v| T::lit(v)).collect())
        .expect("image shape is consistent")
}

fn to_image<T: Real>(t: &Tensor<T>, h: usize, w: usize, label: &str, px: Option<f64>) -> ImagePlane {
    ImagePlane::from_fn(h, w, label, |r, c| t.data()[r * w + c].to_f64().unwrap_or(f64::NAN)).with_pixel_size(px)
}

struct Snapshot {
    y1: ImagePlane,
    y2: ImagePlane,
    i1: ImagePlane,
    i2: ImagePlane,
    alphas: (f64, f64),
}

fn snapshot<T: Real>(
    tape: &Tape<T>,
    out: &crate::model::ModelOutputs,
    (h, w): (usize, usize),
    norm: &[NormalizationRecord; 2],
    px: Option<f64>,
) -> Snapshot {
    let img =
        |v: Var, label: &str, rec: &NormalizationRecord| destandardize(&to_image(tape.value(v), h, w, label, px), rec);
    Snapshot {
        y1: img(out.y1, "y1", &norm[0]),
        y2: img(out.y2, "y2", &norm[1]),
        i1: img(out.i1, "i1", &norm[0]),
        i2: img(out.i2, "i2", &norm[1]),
        alphas: out.alphas.values(tape),
    }
}

fn separate<T: Real>(
    cfg: &SeparationConfig,
    i1_obs: &ImagePlane,
    i2_obs: &ImagePlane,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    let start = Instant::now();
    let Some(seed) = cfg.seed else {
        return config_err("run seed is not set");
    };
    if !i1_obs.same_shape(i2_obs) {
        return config_err(format!(
            "input shapes differ: {}x{} vs {}x{}",
            i1_obs.height, i1_obs.width, i2_obs.height, i2_obs.width
        ));
    }
    let (h, w) = (i1_obs.height, i1_obs.width);
    let px = i1_obs.pixel_size_nm;
    let (s1, r1) = standardize(i1_obs)?;
    let (s2, r2) = standardize(i2_obs)?;
    let norm = [r1, r2];
    let (obs1, obs2) = (to_tensor::<T>(&s1), to_tensor::<T>(&s2));

    let run_seed = RunSeed(seed);
    let mut model = DdipModel::<T>::build(cfg.model(), h, w, run_seed)?;
    let parameter_count = model.parameter_count();
    let mut adam = AdamState::for_parameters(cfg.learning_rate, &model.parameters_mut());
    let z: Vec<Tensor<T>> = [&model.dip1, &model.dip2, &model.dip3]
        .iter()
        .map(|n| n.fixed_input.clone().expect("generator networks carry z"))
        .collect();
    let mut jitter_rng = run_seed.stream(NetSlot::Jitter.input_stream());
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join(CONFIG_FILE), &cfg.to_kv())?;
    }

    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::<T>::new();
    for epoch in 1..=cfg.epochs {
        tape.clear();
        let bound = model.bind(&mut tape);
        let zv: Vec<Var> = z
            .iter()
            .map(|zi| {
                let mut zi = zi.clone();
                if cfg.z_jitter > 0.0 {
                    for v in zi.data_mut() {
                        let n: f64 = StandardNormal.sample(&mut jitter_rng);
                        *v = *v + T::lit(cfg.z_jitter * n);
                    }
                }
                tape.constant(zi)
            })
            .collect();
        let out = model.forward_with_inputs(&mut tape, &bound, [zv[0], zv[1], zv[2]])?;
        let i1_obs_v = tape.constant(obs1.clone());
        let i2_obs_v = tape.constant(obs2.clone());
        let inputs = LossInputs {
            i1: out.i1,
            i2: out.i2,
            i1_obs: i1_obs_v,
            i2_obs: i2_obs_v,
            y1: out.y1,
            y2: out.y2,
            alphas: out.alphas,
        };
        let (loss, breakdown) = total_loss(&mut tape, &inputs, cfg.gamma_excl, epoch, cfg.model().anchor)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        losses.push(breakdown);
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                let snap = snapshot(&tape, &out, (h, w), &norm, px);
                write_checkpoint(dir, epoch, &snap, &losses)?;
            }
        }
        tape.backward(loss)?;
        model.pull_grads(&tape, &bound);
        adam_step(&mut model.parameters_mut(), &mut adam, epoch)?;
        if epoch % 100 == 0 || epoch == 1 {
            log::info!(
                "epoch {epoch}/{}: total {:.6} data {:.6} excl {:.6} anchor {:.6}",
                cfg.epochs,
                breakdown.total,
                breakdown.data_term,
                breakdown.exclusion_term,
                breakdown.alpha_anchor_term
            );
        }
    }

    tape.clear();
    let bound = model.bind(&mut tape);
    let out = model.forward(&mut tape, &bound)?;
    let snap = snapshot(&tape, &out, (h, w), &norm, px);
    let metrics = opts.truth.as_ref().map(|b| score(b, &snap.y1, &snap.y2)).transpose()?;
    let mut report = RunReport {
        config: cfg.clone(),
        seed,
        height: h,
        width: w,
        parameter_count,
        normalization: norm,
        losses,
        alpha1: snap.alphas.0,
        alpha2: snap.alphas.1,
        wall_time_s: 0.0,
        outputs: BTreeMap::new(),
        metrics,
    };
    let outcome_images = [("y1", &snap.y1), ("y2", &snap.y2), ("i1", &snap.i1), ("i2", &snap.i2)];
    if let Some(dir) = &opts.out_dir {
        for (name, img) in outcome_images {
            let raw = dir.join(format!("{name}.f32"));
            let pgm = dir.join(format!("{name}.pgm"));
            save_raw(img, &raw)?;
            export_display(img, &pgm)?;
            report.outputs.insert(format!("{name}_raw"), raw);
            report.outputs.insert(format!("{name}_display"), pgm);
        }
        report.outputs.insert("losses".into(), dir.join(LOSS_FILE));
        report.outputs.insert("config".into(), dir.join(CONFIG_FILE));
        write_text(&dir.join(LOSS_FILE), &loss_csv(&report.losses))?;
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    if let Some(dir) = &opts.out_dir {
        write_text(&dir.join(REPORT_FILE), &report.to_json()?)?;
    }
    Ok(RunOutcome { report, y1: snap.y1, y2: snap.y2, i1: snap.i1, i2: snap.i2 })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn loss_csv(losses: &[LossBreakdown]) -> String {
    let mut s = String::from("epoch,total,data_term,exclusion_term,alpha_anchor_term\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{},{},{},{}\n", i + 1, l.total, l.data_term, l.exclusion_term, l.alpha_anchor_term));
    }
    s
}

fn write_checkpoint(dir: &Path, epoch: usize, snap: &Snapshot, losses: &[LossBreakdown]) -> Result<()> {
    let ck = dir.join("checkpoints").join(format!("epoch_{epoch:06}"));
    fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
    for (name, img) in [("y1", &snap.y1), ("y2", &snap.y2), ("i1", &snap.i1), ("i2", &snap.i2)] {
        save_raw(img, &ck.join(format!("{name}.f32")))?;
    }
    let summary = serde_json::json!({
        "epoch": epoch,
        "alpha1": snap.alphas.0,
        "alpha2": snap.alphas.1,
        "loss": losses.last(),
    });
    write_text(&ck.join("checkpoint.json"), &serde_json::to_string_pretty(&summary)?)?;
    write_text(&ck.join(LOSS_FILE), &loss_csv(losses))
}

/// Settings of a repeated-run sweep over exclusion weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyPlan {
    pub n_runs: usize,
    pub gammas: Vec<f64>,
    /// Use the base seed for every run instead of derived seeds.
    pub identical_seeds: bool,
    /// Worker threads; 0 means one per available core.
    pub threads: usize,
}

/// Repeated runs at one exclusion weight.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GammaSummary {
    pub gamma: f64,
    pub seeds: Vec<u64>,
    /// Final `(alpha1, alpha2)` of each successful run.
    pub alphas: Vec<(f64, f64)>,
    /// Spatial mean of the per-pixel std map of `y2`; absent with fewer than
    /// two successful runs.
    pub mean_std: Option<f64>,
    #[serde(skip)]
    pub std_map: Option<ImagePlane>,
    pub metrics: Vec<SeparationMetrics>,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub base_seed: u64,
    pub plan: UncertaintyPlan,
    pub per_gamma: Vec<GammaSummary>,
}

impl UncertaintyReport {
    pub fn mean_std_csv(&self) -> String {
        let mut s = String::from("gamma_excl,runs,mean_std\n");
        for g in &self.per_gamma {
            let m = g.mean_std.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", g.gamma, g.alphas.len(), m));
        }
        s
    }
}

/// Seeds of the runs of a sweep; the same seeds are reused for every gamma.
pub fn uncertainty_seeds(base: u64, n_runs: usize, identical: bool) -> Vec<u64> {
    (0..n_runs).map(|k| if identical { base } else { RunSeed(base).derive(k as u64).0 }).collect()
}

/// Run `plan.n_runs` separations per gamma and summarize the spread of `y2`.
///
/// Runs execute in parallel and are fully independent; results do not
/// depend on the number of workers. Failed runs are recorded and the
/// remaining ones still summarized.
pub fn run_uncertainty(
    cfg: &SeparationConfig,
    i1_obs: &ImagePlane,
    i2_obs: &ImagePlane,
    plan: &UncertaintyPlan,
    opts: &RunOptions,
) -> Result<UncertaintyReport> {
    if plan.n_runs < 2 {
        return config_err(format!("uncertainty needs at least 2 runs, got {}", plan.n_runs));
    }
    if plan.gammas.is_empty() {
        return config_err("uncertainty needs at least one gamma");
    }
    let Some(base_seed) = cfg.seed else {
        return config_err("run seed is not set");
    };
    for &g in &plan.gammas {
        let mut c = cfg.clone();
        c.gamma_excl = g;
        c.validate()?;
    }
    let seeds = uncertainty_seeds(base_seed, plan.n_runs, plan.identical_seeds);
    let jobs: Vec<(usize, usize)> =
        (0..plan.gammas.len()).flat_map(|g| (0..plan.n_runs).map(move |k| (g, k))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<RunOutcome>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(g, k)| {
                let mut c = cfg.clone();
                c.gamma_excl = plan.gammas[g];
                c.seed = Some(seeds[k]);
                let run_opts = RunOptions {
                    out_dir: opts
                        .out_dir
                        .as_ref()
                        .map(|d| d.join(gamma_dir(plan.gammas[g])).join(format!("run_{k:02}"))),
                    truth: opts.truth.clone(),
                };
                run_separation(&c, i1_obs, i2_obs, &run_opts)
            })
            .collect()
    });

    let mut per_gamma = Vec::with_capacity(plan.gammas.len());
    let mut results = results.into_iter();
    for &gamma in &plan.gammas {
        let mut stack = Vec::new();
        let mut summary = GammaSummary {
            gamma,
            seeds: seeds.clone(),
            alphas: Vec::new(),
            mean_std: None,
            std_map: None,
            metrics: Vec::new(),
            failures: Vec::new(),
        };
        for (k, res) in results.by_ref().take(plan.n_runs).enumerate() {
            match res {
                Ok(out) => {
                    summary.alphas.push((out.report.alpha1, out.report.alpha2));
                    summary.metrics.extend(out.report.metrics.clone());
                    stack.push(out.y2);
                }
                Err(e) => {
                    log::warn!("gamma {gamma} run {k} failed: {e}");
                    summary.failures.push(format!("run {k} (seed {}): {e}", seeds[k]));
                }
            }
        }
        if stack.len() >= 2 {
            let map = std_map(&stack)?;
            summary.mean_std = Some(map.mean());
            summary.std_map = Some(map);
        }
        per_gamma.push(summary);
    }
    let report = UncertaintyReport { base_seed, plan: plan.clone(), per_gamma };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for g in &report.per_gamma {
            if let Some(map) = &g.std_map {
                let sub = dir.join(gamma_dir(g.gamma));
                fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                save_raw(map, &sub.join("std_map.f32"))?;
                export_display(map, &sub.join("std_map.pgm"))?;
            }
        }
        write_text(&dir.join("mean_std.csv"), &report.mean_std_csv())?;
        write_text(&dir.join("uncertainty.json"), &serde_json::to_string_pretty(&report)?)?;
        write_text(&dir.join(CONFIG_FILE), &cfg.to_kv())?;
    }
    Ok(report)
}

fn gamma_dir(gamma: f64) -> String {
    format!("gamma_{gamma}")
}
