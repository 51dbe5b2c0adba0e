//! Subcommand implementations. Every command writes the resolved config and a
//! manifest into its output directory.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use pfm_core::baselines::{
    grid_support, kl_tilt, snap_pairs, train_dpo, train_reward, DiscretePolicy, OverfitTrace, RewardModel,
};
use pfm_core::eval::{mean_reward, EvalContext, MetricsReport};
use pfm_core::flowmatch::{
    iterate_pfm, train_flow, CompositeSampler, EpochLoss, FlowField, IterateConfig, IterateMode, IterateSetup,
    SampleSource, TrainedFlow,
};
use pfm_core::nnflow::save_checkpoint;
use pfm_core::oracle::{
    check_theorem1, check_theorem2, marginal_negative, marginal_positive, DiscreteDist, OracleInstance,
    PreferenceMatrix,
};
use pfm_core::prefdata::{collect_dataset, load_dataset, write_dataset, PreferenceDataset};
use pfm_core::rng::{derive_seed, StageSeeds};
use pfm_core::{nnflow, Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifacts::{ArtifactDir, Progress, RESOLVED_CONFIG};
use crate::config::{RunConfig, SourceKind};

pub const DATASET: &str = "dataset.csv";
pub const FLOW: &str = "flow.ckpt";
pub const TRAIN_LOSS: &str = "train_loss.csv";
pub const SAMPLES: &str = "samples.csv";

fn infer_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, "infer", 0)
}

fn open_output(cfg: &RunConfig) -> Result<ArtifactDir> {
    let art = ArtifactDir::create(&cfg.output_dir)?;
    art.write_text(RESOLVED_CONFIG, &cfg.to_toml())?;
    Ok(art)
}

fn dataset_bytes(ds: &PreferenceDataset) -> Vec<u8> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, ds).expect("writing to memory");
    buf
}

fn losses_csv(losses: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,loss\n");
    for l in losses {
        out.push_str(&format!("{},{}\n", l.epoch, pfm_core::prefdata::fmt_f64(l.loss)));
    }
    out
}

fn generate_dataset(cfg: &RunConfig) -> Result<PreferenceDataset> {
    let seeds = StageSeeds::from_master(cfg.seed);
    collect_dataset(&cfg.data.reference, &cfg.labeler()?, cfg.data.n, cfg.context(), seeds.data)
}

/// The configured dataset file, or a freshly generated dataset written to `dataset.csv`.
fn obtain_dataset(cfg: &RunConfig, art: &ArtifactDir, progress: &Progress) -> Result<PreferenceDataset> {
    match &cfg.data.dataset {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Usage(format!("dataset file not found: {}", path.display())));
            }
            load_dataset(path)
        }
        None => {
            let ds = generate_dataset(cfg)?;
            art.write_bytes(DATASET, &dataset_bytes(&ds))?;
            progress.emit("artifact", json!({ "path": DATASET, "pairs": ds.len() }));
            Ok(ds)
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{what} not found: {}", path.display())))
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, progress: &Progress) -> Result<()> {
    progress.stage("gen-data", "start");
    let art = open_output(cfg)?;
    let ds = generate_dataset(cfg)?;
    art.write_bytes(DATASET, &dataset_bytes(&ds))?;
    art.write_manifest()?;
    progress.emit("done", json!({ "command": "gen-data", "pairs": ds.len(), "y_dim": ds.y_dim }));
    Ok(())
}

fn train_on(cfg: &RunConfig, ds: &PreferenceDataset) -> Result<TrainedFlow> {
    let seeds = StageSeeds::from_master(cfg.seed);
    let init = FlowField::init(&cfg.model, ds.y_dim, ds.x_dim, seeds.init)?;
    train_flow(ds, init, &cfg.path, &cfg.train_config(seeds.train))
}

pub fn cmd_train(cfg: &RunConfig, progress: &Progress) -> Result<()> {
    progress.stage("train", "start");
    let art = open_output(cfg)?;
    let ds = obtain_dataset(cfg, &art, progress)?;
    let trained = train_on(cfg, &ds)?;
    art.write_bytes(FLOW, &trained.field.to_bytes())?;
    art.write_text(TRAIN_LOSS, &losses_csv(&trained.losses))?;
    art.write_manifest()?;
    let last = trained.losses.last().map(|l| l.loss);
    progress.emit("done", json!({ "command": "train", "epochs": trained.losses.len(), "final_loss": last }));
    Ok(())
}

fn sampler_for(cfg: &RunConfig, source: SourceKind, flows: Vec<FlowField>) -> Result<CompositeSampler> {
    let source = cfg.source(source)?;
    for f in &flows {
        if f.y_dim != source.dim() {
            return Err(Error::Shape(format!(
                "checkpoint has y_dim {}, reference policy has dim {}",
                f.y_dim,
                source.dim()
            )));
        }
    }
    Ok(CompositeSampler {
        source,
        flows,
        ode: cfg.ode,
    })
}

pub fn cmd_infer(cfg: &RunConfig, progress: &Progress) -> Result<()> {
    progress.stage("infer", "start");
    let ckpt = cfg.infer.checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join(FLOW));
    require_file(&ckpt, "checkpoint")?;
    let field = FlowField::load(&ckpt)?;
    let art = open_output(cfg)?;
    let sampler = sampler_for(cfg, cfg.infer.source, vec![field])?;
    let samples = sampler.sample(cfg.infer.n_samples, infer_seed(cfg))?;
    art.write_cloud(SAMPLES, &samples)?;
    art.write_manifest()?;
    progress.emit("done", json!({ "command": "infer", "samples": samples.nrows() }));
    Ok(())
}

/// Artifacts of one iterate run, kept in memory for downstream stages.
pub struct IterateRun {
    pub sampler: CompositeSampler,
    pub datasets: Vec<PreferenceDataset>,
    pub losses: Vec<Vec<EpochLoss>>,
    pub clouds: Vec<Array2<f64>>,
}

fn run_iterate(cfg: &RunConfig, art: &ArtifactDir, prefix: &str, progress: &Progress) -> Result<IterateRun> {
    let labeler = cfg.labeler()?;
    let train = cfg.train_config(0);
    let setup = IterateSetup {
        labeler: Some(&labeler),
        field: &cfg.model,
        path: &cfg.path,
        train: &train,
        ode: &cfg.ode,
        context: cfg.context(),
        master_seed: cfg.seed,
    };
    let it = IterateConfig {
        iterations: cfg.iterate.iterations,
        mode: cfg.iterate.mode,
        pairs_per_iter: cfg.data.n,
    };
    let pretrained = match cfg.iterate.mode {
        IterateMode::Retrain => None,
        IterateMode::Reapply => {
            let ckpt = cfg.iterate.checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join(FLOW));
            require_file(&ckpt, "checkpoint")?;
            Some(FlowField::load(&ckpt)?)
        }
    };
    let source = SampleSource::reference(cfg.data.reference.clone());
    let out = iterate_pfm(&source, &setup, &it, pretrained.as_ref())?;
    let mut run = IterateRun {
        sampler: out.sampler.clone(),
        datasets: Vec::new(),
        losses: Vec::new(),
        clouds: Vec::new(),
    };
    for k in 1..=cfg.iterate.iterations {
        let dir = format!("{prefix}iter_{k}");
        if let Some(round) = out.rounds.get(k - 1) {
            art.write_bytes(&format!("{dir}/{DATASET}"), &dataset_bytes(&round.dataset))?;
            art.write_bytes(&format!("{dir}/{FLOW}"), &out.flows[k - 1].to_bytes())?;
            art.write_text(&format!("{dir}/{TRAIN_LOSS}"), &losses_csv(&round.losses))?;
            run.datasets.push(round.dataset.clone());
            run.losses.push(round.losses.clone());
        }
        let cloud = out.prefix_sampler(k).sample(cfg.infer.n_samples, infer_seed(cfg))?;
        art.write_cloud(&format!("{dir}/{SAMPLES}"), &cloud)?;
        run.clouds.push(cloud);
        progress.emit("iteration", json!({ "iteration": k, "dir": dir }));
    }
    Ok(run)
}

pub fn cmd_iterate(cfg: &RunConfig, progress: &Progress) -> Result<()> {
    progress.stage("iterate", "start");
    let art = open_output(cfg)?;
    run_iterate(cfg, &art, "", progress)?;
    art.write_manifest()?;
    progress.emit("done", json!({ "command": "iterate", "iterations": cfg.iterate.iterations }));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub name: String,
    pub negative_marginal: DiscreteDist,
    pub positive_marginal: DiscreteDist,
    pub convergence: pfm_core::oracle::ConvergenceReport,
    pub objective: pfm_core::oracle::Theorem1Report,
}

fn instance_report(cfg: &RunConfig, name: &str, inst: &OracleInstance, seed: u64) -> Result<InstanceReport> {
    let o = &cfg.oracle;
    Ok(InstanceReport {
        name: name.into(),
        negative_marginal: marginal_negative(&inst.reference, &inst.prefs)?,
        positive_marginal: marginal_positive(&inst.reference, &inst.prefs)?,
        convergence: check_theorem2(&inst.reference, &inst.prefs, o.iterate_tolerance, o.iterate_max_iters)?,
        objective: check_theorem1(&inst.reference, &inst.prefs, o.objective_draws, seed, o.objective_slack)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub objective_instances: usize,
    pub objective_passed: usize,
    pub iterate_instances: usize,
    pub iterate_passed: usize,
    pub bundled_passed: bool,
    pub all_passed: bool,
}

/// Returns the summary; `all_passed` is false if any check failed.
pub fn cmd_oracle(cfg: &RunConfig, progress: &Progress) -> Result<OracleSummary> {
    progress.stage("oracle", "start");
    let art = open_output(cfg)?;
    let o = &cfg.oracle;
    if let Some(path) = &o.instance {
        require_file(path, "oracle instance")?;
        let inst = OracleInstance::load(path)?;
        let rep = instance_report(cfg, "instance", &inst, derive_seed(cfg.seed, "oracle-draws", 0))?;
        art.write_json("instance_report.json", &rep)?;
        let passed = rep.convergence.converged && rep.convergence.argmax_mass_nondecreasing && rep.objective.passed;
        let summary = OracleSummary {
            objective_instances: 1,
            objective_passed: rep.objective.passed as usize,
            iterate_instances: 1,
            iterate_passed: (rep.convergence.converged && rep.convergence.argmax_mass_nondecreasing) as usize,
            bundled_passed: true,
            all_passed: passed,
        };
        art.write_json("oracle_summary.json", &summary)?;
        art.write_manifest()?;
        progress.emit("done", json!({ "command": "oracle", "all_passed": passed }));
        return Ok(summary);
    }

    let three = OracleInstance::three_point_total_order();
    let half = OracleInstance::constant_half_uniform(5);
    art.write_text("instances/three_point_total_order.txt", &three.to_text())?;
    art.write_text("instances/constant_half_uniform.txt", &half.to_text())?;
    let r3 = instance_report(cfg, "three_point_total_order", &three, derive_seed(cfg.seed, "oracle-draws", 0))?;
    let rh = instance_report(cfg, "constant_half_uniform", &half, derive_seed(cfg.seed, "oracle-draws", 1))?;
    let bundled_passed = r3.convergence.converged
        && r3.convergence.limit == DiscreteDist::point_mass(3, 2)
        && rh.convergence.converged
        && rh.convergence.iterations_used == 0;
    art.write_json("three_point_total_order.json", &r3)?;
    art.write_json("constant_half_uniform.json", &rh)?;

    let mut objective_csv = String::from("instance,min_margin,violations,passed\n");
    let mut objective_passed = 0;
    for i in 0..o.objective_instances {
        let inst = OracleInstance::random_general(o.objective_points, derive_seed(cfg.seed, "oracle-objective", i as u64));
        let rep = check_theorem1(
            &inst.reference,
            &inst.prefs,
            o.objective_draws,
            derive_seed(cfg.seed, "oracle-draws", 2 + i as u64),
            o.objective_slack,
        )?;
        objective_passed += rep.passed as usize;
        objective_csv.push_str(&format!(
            "{i},{},{},{}\n",
            pfm_core::prefdata::fmt_f64(rep.min_margin),
            rep.violations,
            rep.passed
        ));
    }
    art.write_text("objective_sweep.csv", &objective_csv)?;

    let mut iterate_csv = String::from("instance,iterations_used,final_l1_to_limit,converged,argmax_mass_nondecreasing\n");
    let mut iterate_passed = 0;
    for i in 0..o.iterate_instances {
        let inst = OracleInstance::random_unique_argmax(
            o.iterate_points,
            derive_seed(cfg.seed, "oracle-iterate", i as u64),
            o.iterate_min_gap,
        );
        let rep = check_theorem2(&inst.reference, &inst.prefs, o.iterate_tolerance, o.iterate_max_iters)?;
        let ok = rep.converged && rep.argmax_mass_nondecreasing && rep.argmax.len() == 1;
        iterate_passed += ok as usize;
        iterate_csv.push_str(&format!(
            "{i},{},{},{},{}\n",
            rep.iterations_used,
            pfm_core::prefdata::fmt_f64(rep.final_l1_to_limit),
            rep.converged,
            rep.argmax_mass_nondecreasing
        ));
    }
    art.write_text("iterate_sweep.csv", &iterate_csv)?;

    let summary = OracleSummary {
        objective_instances: o.objective_instances,
        objective_passed,
        iterate_instances: o.iterate_instances,
        iterate_passed,
        bundled_passed,
        all_passed: bundled_passed && objective_passed == o.objective_instances && iterate_passed == o.iterate_instances,
    };
    art.write_json("oracle_summary.json", &summary)?;
    art.write_manifest()?;
    progress.emit("done", json!({ "command": "oracle", "summary": summary }));
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapGrowth {
    pub epoch: usize,
    pub gap: Option<f64>,
    pub epoch_10x: usize,
    pub gap_10x: Option<f64>,
    /// `gap_10x >= 2 * gap`.
    pub grows: bool,
}

impl GapGrowth {
    fn from_trace(trace: &OverfitTrace, epoch: usize) -> Self {
        let gap = trace.gap_at(epoch);
        let gap_10x = trace.gap_at(10 * epoch);
        Self {
            epoch,
            gap,
            epoch_10x: 10 * epoch,
            gap_10x,
            grows: matches!((gap, gap_10x), (Some(a), Some(b)) if b >= 2.0 * a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitSummary {
    pub reward_model: GapGrowth,
    pub dpo: GapGrowth,
}

pub struct BaselineRun {
    pub overfit: OverfitSummary,
    /// `(method name, samples)`.
    pub clouds: Vec<(String, Array2<f64>)>,
}

fn policy_from_dist(support: Vec<Vec<f64>>, d: &DiscreteDist) -> Result<DiscretePolicy> {
    DiscretePolicy::new(support, d.probs().iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect())
}

fn run_baselines(
    cfg: &RunConfig,
    ds: &PreferenceDataset,
    art: &ArtifactDir,
    prefix: &str,
    progress: &Progress,
) -> Result<BaselineRun> {
    let b = &cfg.baseline;
    let n = cfg.infer.n_samples;

    progress.stage("reward_model", "start");
    let spec = cfg.reward_spec(derive_seed(cfg.seed, "reward-init", 0))?;
    let (model, reward_trace) = train_reward(ds, &spec, &cfg.reward_train_config(derive_seed(cfg.seed, "reward-train", 0)))?;
    let ckpt = art.path(&format!("{prefix}reward.ckpt"));
    if let Some(parent) = ckpt.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_checkpoint(&ckpt, &model.net, &json!({ "kind": "reward_model" }))?;
    art.write_text(&format!("{prefix}reward_trace.csv"), &reward_trace.to_csv())?;

    progress.stage("dpo", "start");
    let dim = ds.y_dim;
    let support = grid_support(b.grid.lo, b.grid.hi, b.grid.points_per_axis, dim)?;
    let cell = (b.grid.hi - b.grid.lo) / (b.grid.points_per_axis - 1) as f64;
    let reference = DiscreteDist::from_weights(support.iter().map(|y| cfg.data.reference.pdf(y)).collect())?;
    let pairs = snap_pairs(&support, &ds.triples);
    let (dpo, dpo_trace) = train_dpo(support.clone(), &reference, &pairs, &b.dpo)?;
    dpo.save(art.path(&format!("{prefix}dpo_policy.txt")))?;
    art.write_text(&format!("{prefix}dpo_trace.csv"), &dpo_trace.to_csv())?;
    let dpo_cloud = dpo.sample(n, derive_seed(cfg.seed, "dpo-sample", 0), cell)?;
    art.write_cloud(&format!("{prefix}dpo_samples.csv"), &dpo_cloud)?;

    progress.stage("rlhf", "start");
    let rewards: Vec<f64> = support.iter().map(|y| cfg.data.reward.eval(y)).collect();
    let prefs = PreferenceMatrix::bradley_terry(&rewards, b.rlhf_temperature)?;
    let optimum = pfm_core::oracle::rlhf_optimal(&reference, &prefs, b.dpo.beta)?;
    let rlhf = policy_from_dist(support.clone(), &optimum)?;
    rlhf.save(art.path(&format!("{prefix}rlhf_policy.txt")))?;
    let rlhf_cloud = rlhf.sample(n, derive_seed(cfg.seed, "rlhf-sample", 0), cell)?;
    art.write_cloud(&format!("{prefix}rlhf_samples.csv"), &rlhf_cloud)?;

    let grid = nnflow::rows_to_array(&support, dim)?;
    let learned = RewardModel::rewards(&model, &vec![0.0; ds.x_dim], grid.view())?;
    let tilted = kl_tilt(&reference, &learned, b.dpo.beta)?;
    let rlhf_learned = policy_from_dist(support, &tilted)?;
    rlhf_learned.save(art.path(&format!("{prefix}rlhf_learned_reward_policy.txt")))?;
    let learned_cloud = rlhf_learned.sample(n, derive_seed(cfg.seed, "rlhf-learned-sample", 0), cell)?;
    art.write_cloud(&format!("{prefix}rlhf_learned_reward_samples.csv"), &learned_cloud)?;

    let overfit = OverfitSummary {
        reward_model: GapGrowth::from_trace(&reward_trace, b.reward_overfit_epoch),
        dpo: GapGrowth::from_trace(&dpo_trace, b.dpo_overfit_epoch),
    };
    art.write_json(&format!("{prefix}overfit_summary.json"), &overfit)?;
    Ok(BaselineRun {
        overfit,
        clouds: vec![
            ("dpo".into(), dpo_cloud),
            ("rlhf".into(), rlhf_cloud),
            ("rlhf_learned_reward".into(), learned_cloud),
        ],
    })
}

pub fn cmd_baseline(cfg: &RunConfig, progress: &Progress) -> Result<OverfitSummary> {
    progress.stage("baseline", "start");
    let art = open_output(cfg)?;
    let ds = obtain_dataset(cfg, &art, progress)?;
    let run = run_baselines(cfg, &ds, &art, "", progress)?;
    art.write_manifest()?;
    progress.emit("done", json!({ "command": "baseline", "overfit": run.overfit }));
    Ok(run.overfit)
}

fn positives(ds: &PreferenceDataset) -> Result<Array2<f64>> {
    nnflow::rows_to_array(&ds.positives(), ds.y_dim)
}

/// Score clouds against reference draws (the `eval` stage seed) and the dataset's preferred samples.
fn score_clouds(
    cfg: &RunConfig,
    ds: &PreferenceDataset,
    clouds: &[(String, &Array2<f64>)],
) -> Result<MetricsReport> {
    let labeler = cfg.labeler()?;
    let seeds = StageSeeds::from_master(cfg.seed);
    let source = SampleSource::reference(cfg.data.reference.clone());
    let pos = positives(ds)?;
    let mut report = MetricsReport::default();
    for (name, cloud) in clouds {
        let reference = source.draw_many(cloud.nrows(), seeds.eval)?;
        let ctx = EvalContext {
            reference_samples: reference.view(),
            positives: pos.view(),
            labeler: &labeler,
            seed: seeds.eval,
        };
        report.insert(name.clone(), ctx.score(cloud.view())?)?;
    }
    Ok(report)
}

pub fn cmd_eval(cfg: &RunConfig, progress: &Progress) -> Result<MetricsReport> {
    progress.stage("eval", "start");
    let art = open_output(cfg)?;
    let ds = obtain_dataset(cfg, &art, progress)?;
    let mut loaded = Vec::new();
    for (name, path) in &cfg.eval.clouds {
        require_file(path, &format!("sample cloud {name:?}"))?;
        loaded.push((name.clone(), crate::artifacts::read_cloud(path)?));
    }
    if loaded.is_empty() {
        return Err(Error::Config("eval.clouds: no sample files given".into()));
    }
    let refs: Vec<(String, &Array2<f64>)> = loaded.iter().map(|(n, c)| (n.clone(), c)).collect();
    let report = score_clouds(cfg, &ds, &refs)?;
    art.write_text("metrics.json", &report.to_json())?;
    art.write_text("metrics.csv", &report.to_csv())?;
    art.write_manifest()?;
    progress.emit("done", json!({ "command": "eval", "methods": report.methods.len() }));
    Ok(report)
}

/// Checks that the first flow stays tame on deterministic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowBounds {
    /// Flow-matching loss of the zero field, `mean |y+ - y-|^2`.
    pub zero_field_loss: f64,
    pub final_loss: f64,
    pub max_epoch_loss: f64,
    pub max_pair_distance: f64,
    pub max_displacement: f64,
    /// `final_loss <= zero_field_loss` and `max_epoch_loss <= 2 * zero_field_loss`.
    pub loss_bounded: bool,
    /// `max_displacement <= 2 * max_pair_distance`.
    pub displacement_bounded: bool,
}

fn flow_bounds(ds: &PreferenceDataset, losses: &[EpochLoss], source: &Array2<f64>, pushed: &Array2<f64>) -> FlowBounds {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let sq: Vec<f64> = ds.triples.iter().map(|t| dist(&t.y_plus, &t.y_minus)).collect();
    let zero_field_loss = sq.iter().sum::<f64>() / sq.len() as f64;
    let max_pair_distance = sq.iter().cloned().fold(0.0, f64::max).sqrt();
    let max_displacement = (pushed - source)
        .map_axis(Axis(1), |r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0f64, |m, v| m.max(*v));
    let final_loss = losses.last().map_or(f64::NAN, |l| l.loss);
    let max_epoch_loss = losses.iter().map(|l| l.loss).fold(f64::NEG_INFINITY, f64::max);
    FlowBounds {
        zero_field_loss,
        final_loss,
        max_epoch_loss,
        max_pair_distance,
        max_displacement,
        loss_bounded: final_loss <= zero_field_loss && max_epoch_loss <= 2.0 * zero_field_loss,
        displacement_bounded: max_displacement.is_finite() && max_displacement <= 2.0 * max_pair_distance,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproSummary {
    pub metrics: MetricsReport,
    pub overfit: OverfitSummary,
    pub flow_bounds: FlowBounds,
    /// Reward scale used for tolerance comparisons.
    pub reward_scale: f64,
    pub reference_mean_reward: f64,
}

/// Data, PFM with iterations, p0-sourced inference, baselines, and metrics in one go.
pub fn cmd_repro_8g(cfg: &RunConfig, progress: &Progress) -> Result<ReproSummary> {
    progress.stage("repro-8g", "start");
    let art = open_output(cfg)?;
    let mut cfg = cfg.clone();
    cfg.iterate.mode = IterateMode::Retrain;
    cfg.data.dataset = None;
    let n = cfg.infer.n_samples;

    progress.stage("iterate", "start");
    let it = run_iterate(&cfg, &art, "iterate/", progress)?;
    let ds = &it.datasets[0];

    progress.stage("inference", "start");
    let reference_cloud = SampleSource::reference(cfg.data.reference.clone())
        .draw_many(n, derive_seed(cfg.seed, "reference-cloud", 0))?;
    art.write_cloud("reference_samples.csv", &reference_cloud)?;
    art.write_cloud("positives.csv", &positives(ds)?)?;
    let first = CompositeSampler {
        flows: it.sampler.flows[..1].to_vec(),
        ..it.sampler.clone()
    };
    let p0_sampler = CompositeSampler {
        source: cfg.source(SourceKind::NegativeMarginal)?,
        ..first.clone()
    };
    let p0_cloud = p0_sampler.sample(n, infer_seed(&cfg))?;
    art.write_cloud("pfm_p0_source_samples.csv", &p0_cloud)?;

    let baselines = run_baselines(&cfg, ds, &art, "baseline/", progress)?;

    progress.stage("metrics", "start");
    let mut clouds: Vec<(String, &Array2<f64>)> = vec![("reference".into(), &reference_cloud)];
    for (k, c) in it.clouds.iter().enumerate() {
        let name = if k == 0 { "pfm".to_string() } else { format!("pfm_iter{}", k + 1) };
        clouds.push((name, c));
    }
    clouds.push(("pfm_p0_source".into(), &p0_cloud));
    for (name, c) in &baselines.clouds {
        clouds.push((name.clone(), c));
    }
    let metrics = score_clouds(&cfg, ds, &clouds)?;
    art.write_text("metrics.json", &metrics.to_json())?;
    art.write_text("metrics.csv", &metrics.to_csv())?;

    let source = first.source.draw_many(n, infer_seed(&cfg))?;
    let bounds = flow_bounds(ds, &it.losses[0], &source, &it.clouds[0]);
    art.write_json("flow_bounds.json", &bounds)?;

    let summary = ReproSummary {
        reference_mean_reward: mean_reward(reference_cloud.view(), &cfg.data.reward)?,
        reward_scale: cfg.data.reward.scale(),
        metrics,
        overfit: baselines.overfit,
        flow_bounds: bounds,
    };
    art.write_json("summary.json", &summary)?;
    art.write_manifest()?;
    progress.emit("done", json!({ "command": "repro-8g" }));
    Ok(summary)
}

/// Resolve the output directory override and the seed override onto a config.
pub fn apply_overrides(mut cfg: RunConfig, seed: Option<u64>, out: Option<PathBuf>) -> RunConfig {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg
}
