use std::collections::BTreeMap;
use std::fmt;

use epitrans::fusion::{FusionParams, WeightMode};
use epitrans::geometry::CameraView;
use epitrans::gradcheck::{self, Dims, Problem};
use epitrans::io::{self, PoseRow};
use epitrans::metrics::evaluate;
use epitrans::scenario::{Built, Scenario};
use epitrans::synth::{render_descriptor_map, run_pipeline, similarity_profile, ProfileRow};
use epitrans::triangulation::{ransac_triangulate, Observation, RansacConfig};
use epitrans::Error;
use nalgebra::Point2;
use rayon::prelude::*;
use serde_json::json;

use crate::{
    Command, EvalArgs, FusionArgs, GenArgs, GradcheckArgs, ProfileArgs, RunArgs, ScenarioArgs, TriangulateArgs,
};

const DEFAULT_SCENARIO: &str = include_str!("../../../configs/default.json");

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    /// A check ran to completion and did not pass.
    Failed(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(
                Error::Format(_) | Error::Io(_) | Error::InvalidArgument(_) | Error::DimsTooLarge(_),
            ) => 2,
            CliError::Failed(_) | CliError::Core(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::RigGen(a) => rig_gen(a),
        Command::SceneGen(a) => scene_gen(a),
        Command::Run(a) => run(a),
        Command::Profile(a) => profile(a),
        Command::Triangulate(a) => triangulate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Eval(a) => eval(a),
    }
}

fn load_scenario(args: &ScenarioArgs) -> Result<Scenario> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?,
        None => DEFAULT_SCENARIO.to_string(),
    };
    let mut scenario = Scenario::from_json(&text)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    Ok(scenario)
}

fn build(scenario_args: &ScenarioArgs, fusion: &FusionArgs) -> Result<Built> {
    let mut scenario = load_scenario(scenario_args)?;
    if let Some(k) = fusion.k {
        scenario.k = k;
    }
    if let Some(v) = fusion.variant {
        scenario.variant = v.into();
    }
    if let Some(m) = fusion.mode {
        scenario.weight_mode = m.into();
    }
    let mut built = scenario.build()?;
    if let Some(path) = &fusion.params {
        let mut params: FusionParams = io::read_params(path)?;
        if fusion.variant.is_some_and(|v| params.variant != v.into()) {
            return Err(CliError::Usage(format!(
                "--variant disagrees with the variant stored in {}",
                path.display()
            )));
        }
        if let Some(m) = fusion.mode {
            params.mode = m.into();
        }
        if params.channels() != scenario.channels {
            return Err(CliError::Usage(format!(
                "{} has {} channels, scenario has {}",
                path.display(),
                params.channels(),
                scenario.channels
            )));
        }
        built.params = params.with_temperature(scenario.temperature)?;
    }
    Ok(built)
}

fn rig_gen(a: GenArgs) -> Result<()> {
    let scenario = load_scenario(&a.scenario)?;
    scenario.validate()?;
    let rig = scenario.rig()?;
    io::write_json(&a.out, &rig.cameras)?;
    Ok(())
}

fn scene_gen(a: GenArgs) -> Result<()> {
    let scenario = load_scenario(&a.scenario)?;
    scenario.validate()?;
    let scene = scenario.scene()?;
    io::write_json(&a.out, &scene)?;
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let built = build(&a.scenario, &a.fusion)?;
    let out = run_pipeline(&built.rig, &built.scene, &built.params, &built.pipeline)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", a.out.display())))?;
    if a.save_maps {
        for (v, map) in out.fused_maps.iter().enumerate() {
            io::write_feature_map(&a.out.join(format!("fused_{v}.fmap")), map)?;
        }
    }
    io::write_json(&a.out.join("report.json"), &out.report)?;
    let r = &out.report;
    println!(
        "mpjpe_mm={} jdr_pct={} matching_accuracy={} triangulated={}/{}",
        r.mpjpe_mm,
        r.jdr_pct,
        r.matching_accuracy,
        r.triangulated,
        built.scene.joints.len()
    );
    Ok(())
}

fn profile(a: ProfileArgs) -> Result<()> {
    let built = build(&a.scenario, &a.fusion)?;
    let n = built.rig.cameras.len();
    if a.ref_view >= n {
        return Err(CliError::Usage(format!("--ref-view {} out of range (rig has {n} views)", a.ref_view)));
    }
    if a.joint >= built.scene.joints.len() {
        return Err(CliError::Usage(format!(
            "--joint {} out of range (scene has {} joints)",
            a.joint,
            built.scene.joints.len()
        )));
    }
    let src = match a.src_view {
        Some(s) if s >= n || s == a.ref_view => {
            return Err(CliError::Usage(format!(
                "--src-view {s} must be a view other than the reference, below {n}"
            )))
        }
        Some(s) => s,
        None => built
            .rig
            .source_for(a.ref_view, built.pipeline.target_angle_deg)
            .expect("rig has at least two views"),
    };
    let cfg = &built.pipeline;
    let maps = built
        .rig
        .cameras
        .par_iter()
        .map(|cam| render_descriptor_map(cam, &built.scene, cfg.sigma_px, cfg.map_wh))
        .collect::<epitrans::Result<Vec<_>>>()?;
    let prof = similarity_profile(&built.rig, &built.scene, &maps, &built.params, cfg, a.ref_view, src, a.joint)?;
    if prof.rows.is_empty() {
        eprintln!(
            "warning: joint {} has no epipolar samples from view {} into view {}; writing an empty profile",
            a.joint, a.ref_view, src
        );
    }
    let text = profile_csv(&prof.rows);
    match &a.out {
        Some(path) => io::write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn profile_csv(rows: &[ProfileRow]) -> String {
    let mut s = String::from("t,x,y,weight,dot\n");
    for r in rows {
        s.push_str(&format!("{:?},{:?},{:?},{:?},{:?}\n", r.t, r.x, r.y, r.weight, r.dot));
    }
    s
}

fn triangulate(a: TriangulateArgs) -> Result<()> {
    let cameras: Vec<CameraView> = io::read_json(&a.rig)?;
    let rows = io::read_observations(&a.observations)?;
    if let Some(r) = rows.iter().find(|r| r.view_id >= cameras.len()) {
        return Err(CliError::Usage(format!(
            "observation references view {} but the rig has {} views",
            r.view_id,
            cameras.len()
        )));
    }
    if !(a.threshold_px > 0.0) || a.iterations == 0 {
        return Err(CliError::Usage("--threshold-px and --iterations must be positive".into()));
    }
    let config = RansacConfig {
        threshold_px: a.threshold_px,
        iterations: a.iterations,
    };
    let mut by_joint: BTreeMap<u32, Vec<Observation<'_>>> = BTreeMap::new();
    for r in &rows {
        by_joint
            .entry(r.joint_id)
            .or_default()
            .push(Observation::new(&cameras[r.view_id], Point2::new(r.x, r.y), r.confidence));
    }
    let joints: Vec<_> = by_joint.into_iter().collect();
    let results: Vec<_> = joints
        .par_iter()
        .map(|(id, obs)| (*id, obs.len(), ransac_triangulate(obs, &config, a.seed.wrapping_add(u64::from(*id)))))
        .collect();
    let mut pose = Vec::new();
    let mut last_err = None;
    for (id, count, res) in results {
        match res {
            Ok(t) => {
                let p = t.point;
                pose.push(PoseRow {
                    joint_id: id,
                    x: p.x,
                    y: p.y,
                    z: Some(p.z),
                    confidence: t.inlier_count() as f64 / count as f64,
                    line: 0,
                });
            }
            Err(e) => {
                eprintln!("warning: joint {id} skipped: {e}");
                last_err = Some(e);
            }
        }
    }
    if pose.is_empty() {
        return Err(last_err.map_or_else(|| CliError::Usage("no observations".into()), CliError::Core));
    }
    io::write_pose(&a.out, &pose)?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let dims = Dims {
        height: a.height,
        width: a.width,
        channels: a.channels,
        k: a.k,
    };
    if dims.work() > gradcheck::MAX_WORK {
        return Err(Error::DimsTooLarge(dims.work()).into());
    }
    if a.trials == 0 || !(a.step > 0.0) {
        return Err(CliError::Usage("--trials and --step must be positive".into()));
    }
    let mode: WeightMode = a.mode.into();
    if mode == WeightMode::Max {
        eprintln!(
            "warning: max mode has subgradient-style gradients; only the selected sample's path is checked \
             and a near-tie may flip under the finite-difference step"
        );
    }
    let mut worst = 0.0_f64;
    let mut trials = Vec::new();
    for seed in a.seed..a.seed.saturating_add(a.trials) {
        let problem = Problem::random(dims, a.variant.into(), mode, seed)?;
        let r = gradcheck::check(&problem, a.step)?;
        println!("seed {seed}: max_rel_error={:e} worst={}[{}]", r.max_rel_error, r.worst.0, r.worst.1);
        worst = worst.max(r.max_rel_error);
        trials.push(json!({
            "seed": seed,
            "max_rel_error": r.max_rel_error,
            "worst_tensor": r.worst.0,
            "worst_index": r.worst.1,
            "checked": r.checked,
        }));
    }
    let passed = worst < gradcheck::PASS_THRESHOLD;
    println!(
        "max relative error {worst:e} (threshold {:e}): {}",
        gradcheck::PASS_THRESHOLD,
        if passed { "PASS" } else { "FAIL" }
    );
    if let Some(path) = &a.out {
        let doc = json!({
            "max_rel_error": worst,
            "threshold": gradcheck::PASS_THRESHOLD,
            "passed": passed,
            "trials": trials,
        });
        io::write_json(path, &doc)?;
    }
    if passed {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check failed: {worst:e} ≥ {:e}",
            gradcheck::PASS_THRESHOLD
        )))
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred = io::read_pose(&a.pred)?;
    let gt = io::read_pose(&a.gt)?;
    let heads = (!a.head_size.is_empty()).then_some(a.head_size.as_slice());
    let report = evaluate(&pred, &gt, heads)?;
    match &a.out {
        Some(path) => io::write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).expect("plain data serializes")),
    }
    Ok(())
}
