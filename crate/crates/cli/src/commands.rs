//! Subcommand implementations.

use anyhow::{anyhow, bail, Context};
use std::path::{Path, PathBuf};

use flexlog::cloud::SceneCloud;
use flexlog::datagen::{self, encode_dataset, generate_dataset, synthesize_corpus, DatasetStats, SynthConfig};
use flexlog::eval::{
    average_precision, eval_objects, target_oriented_ap, EvalReport, SceneEval, AP_TOP_K, DEFAULT_GRADES, TAU_TARGET,
    TOAP_TOP_K,
};
use flexlog::guidance::{centers_from_heatmap, load_graspness, scene_fps_centers, GuidanceError, Heatmap, Target};
use flexlog::model::checkpoint::{load_checkpoint, save_checkpoint};
use flexlog::model::{train, LocalGraspModel, ModelConfig};
use flexlog::pipeline::{Detection, Detector, Guidance, Mode, PipelineError};
use flexlog::postproc::{grasp_nms, DecodedGrasp, DEFAULT_SPLICE_RADIUS_PX};
use flexlog::scene::{list_scene_dirs, load_scene, save_scene, Scene, SceneLabels};

use crate::config::{parse_list, resolve, Command, Opts, Resolved};
use crate::CliError;

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(o) => synth(&resolve(o)?),
        Command::Datagen(o) => datagen_cmd(&resolve(o)?).map(|_| ()),
        Command::Train(o) => train_cmd(&resolve(o)?),
        Command::Detect(o) => detect_cmd(&resolve(o)?),
        Command::Eval(o) => eval_cmd(&resolve(o)?).map(|_| ()),
        Command::Heatmap(o) => heatmap_cmd(&resolve(o)?).map(|_| ()),
        Command::Serve(o) => crate::server::serve_cmd(&resolve(o)?),
    }
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> anyhow::Result<&'a T> {
    v.as_ref().ok_or_else(|| anyhow!("--{flag} is required"))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

/// `base` with its extension replaced by `suffix` (e.g. `data.flxg` ->
/// `data.stats.json`).
fn sibling(base: &Path, suffix: &str) -> PathBuf {
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    base.with_file_name(format!("{stem}.{suffix}"))
}

fn load_scenes(root: &Path) -> Result<Vec<(String, Scene, SceneLabels)>, CliError> {
    let dirs = list_scene_dirs(root).map_err(anyhow::Error::from)?;
    if dirs.is_empty() {
        return Err(CliError::NoScenes);
    }
    dirs.iter()
        .map(|d| {
            let (s, l) = load_scene(d).with_context(|| format!("loading {}", d.display()))?;
            let id = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, s, l))
        })
        .collect()
}

fn synth(r: &Resolved) -> Result<(), CliError> {
    let out = required(&r.opts.out, "out")?;
    let count = r.opts.count.unwrap_or(10);
    if count == 0 {
        return Err(CliError::NoScenes);
    }
    let scenes = synthesize_corpus(count, r.opts.seed.unwrap_or(0), &SynthConfig::default()).map_err(anyhow::Error::from)?;
    for (i, (s, l)) in scenes.iter().enumerate() {
        save_scene(&out.join(format!("scene_{i:04}")), s, l).map_err(anyhow::Error::from)?;
    }
    let labels: usize = scenes.iter().map(|(_, l)| l.grasps.len()).sum();
    println!("scenes {count} labels {labels}");
    Ok(())
}

/// Builds the dataset; returns its stats.
pub fn datagen_cmd(r: &Resolved) -> Result<DatasetStats, CliError> {
    let seed = r.opts.seed.unwrap_or(0);
    let scenes: Vec<(Scene, SceneLabels)> = match &r.opts.scene {
        Some(root) => load_scenes(root)?.into_iter().map(|(_, s, l)| (s, l)).collect(),
        None => {
            let count = r.opts.count.unwrap_or(20);
            if count == 0 {
                return Err(CliError::NoScenes);
            }
            synthesize_corpus(count, seed, &SynthConfig::default()).map_err(anyhow::Error::from)?
        }
    };
    let (samples, stats) = generate_dataset(&scenes, &r.datagen, seed).map_err(anyhow::Error::from)?;
    let out = r.opts.out.clone().unwrap_or_else(|| PathBuf::from("dataset.flxg"));
    std::fs::write(&out, encode_dataset(&samples).map_err(anyhow::Error::from)?).with_context(|| format!("writing {}", out.display()))?;
    let stats_path = sibling(&out, "stats.json");
    write_json(&stats_path, &stats)?;
    println!(
        "regions {} labeled_regions {} labels {} invalid_fraction {:.4}",
        stats.regions, stats.labeled_regions, stats.labels, stats.invalid_fraction
    );
    println!("{}", serde_json::to_string(&stats).map_err(anyhow::Error::from)?);
    Ok(stats)
}

fn model_config(r: &Resolved) -> anyhow::Result<ModelConfig> {
    let mut cfg = match (&r.model, r.opts.model.as_deref()) {
        (Some(c), None) => c.clone(),
        (_, None | Some("default")) => ModelConfig::default(),
        (_, Some("small")) => ModelConfig::small(),
        (_, Some(other)) => bail!("unknown model preset {other:?}"),
    };
    if let Some(n) = r.opts.n_points {
        cfg.n_points = n;
    }
    if let Some(e) = r.opts.epochs {
        cfg.train.epochs = e;
    }
    Ok(cfg)
}

fn train_cmd(r: &Resolved) -> Result<(), CliError> {
    let data = required(&r.opts.data, "data")?;
    let bytes = std::fs::read(data).with_context(|| format!("reading {}", data.display()))?;
    let samples = datagen::decode_dataset(&bytes).map_err(anyhow::Error::from)?;
    let examples: Vec<_> = samples.iter().map(|s| s.to_example()).collect();
    let cfg = model_config(r)?;
    let run = train(&examples, &cfg, r.opts.seed.unwrap_or(0)).map_err(anyhow::Error::from)?;
    let out = r.opts.out.clone().unwrap_or_else(|| PathBuf::from("checkpoint.flxp"));
    save_checkpoint(&run.model, &out).map_err(anyhow::Error::from)?;
    let history = sibling(&out, "history.csv");
    std::fs::write(&history, run.history.to_csv()).with_context(|| format!("writing {}", history.display()))?;
    if let Some(last) = run.history.epochs.last() {
        println!(
            "epochs {} loss {:.5} theta_accuracy {:.3}",
            run.history.epochs.len(),
            last.loss.total,
            last.theta_accuracy
        );
    }
    if let Some(e) = run.aborted {
        return Err(anyhow!("training stopped early: {e}; last finite model saved").into());
    }
    Ok(())
}

fn load_model(r: &Resolved) -> anyhow::Result<LocalGraspModel> {
    let path = required(&r.opts.checkpoint, "checkpoint")?;
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

/// Guidance for the requested mode from flags and guidance files.
pub fn guidance_from(opts: &Opts) -> anyhow::Result<Guidance> {
    let mode: Mode = opts.mode.as_deref().unwrap_or("grid").parse()?;
    let file = || required(&opts.guidance, "guidance");
    Ok(match mode {
        Mode::Grid => Guidance::Grid,
        Mode::Heatmap => Guidance::Heatmap(Heatmap::load_png(file()?)?),
        Mode::Graspness => Guidance::Graspness(load_graspness(file()?)?),
        Mode::Click => match &opts.click {
            Some(c) => {
                let [u, v] = parse_list::<2>(c, "--click")?;
                Guidance::Target(Target::Click { u, v })
            }
            None => Guidance::Target(Target::load(file()?)?),
        },
        Mode::Bbox => match &opts.bbox {
            Some(b) => {
                let [u0, v0, u1, v1] = parse_list::<4>(b, "--bbox")?;
                Guidance::Target(Target::BBox { u0, v0, u1, v1 })
            }
            None => Guidance::Target(Target::load(file()?)?),
        },
        Mode::Mask => Guidance::Target(Target::load(file()?)?),
    })
}

/// Maps "nothing to run the model on" to the dedicated exit code.
pub fn detection_error(e: PipelineError) -> CliError {
    match e {
        PipelineError::NoRegions | PipelineError::Guidance(GuidanceError::EmptyTarget) => CliError::NoRegions(e.to_string()),
        e => CliError::Other(e.into()),
    }
}

fn detect_cmd(r: &Resolved) -> Result<(), CliError> {
    let dir = required(&r.opts.scene, "scene")?;
    let (scene, _) = load_scene(dir).with_context(|| format!("loading {}", dir.display()))?;
    let cloud = scene.cloud().map_err(anyhow::Error::from)?;
    let detector = Detector::new(load_model(r)?, r.detect.clone());
    let guidance = guidance_from(&r.opts)?;
    let det = detector.detect(&cloud, &guidance).map_err(detection_error)?;
    let json = serde_json::to_string_pretty(&det.outputs()).map_err(anyhow::Error::from)?;
    match &r.opts.out {
        Some(p) => std::fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    if let Some(p) = &r.opts.heatmap_out {
        det.splice(cloud.width(), cloud.height(), DEFAULT_SPLICE_RADIUS_PX)
            .map_err(anyhow::Error::from)?
            .map
            .save_png(p)
            .map_err(anyhow::Error::from)?;
    }
    log::info!("{} regions ({} dropped), {} grasps", det.regions.len(), det.dropped, det.grasps.len());
    Ok(())
}

/// Ground-truth labels ranked by score and passed through the same NMS as
/// model output.
pub fn oracle_detections(labels: &SceneLabels, detector_cfg: &flexlog::pipeline::DetectConfig) -> Vec<flexlog::geometry::Grasp> {
    let ranked: Vec<DecodedGrasp> = labels
        .grasps
        .iter()
        .enumerate()
        .map(|(i, l)| DecodedGrasp {
            grasp: l.grasp,
            region_index: i,
            combo: (0, 0, 0),
        })
        .collect();
    grasp_nms(&ranked, detector_cfg.nms_translation, detector_cfg.nms_rotation)
        .into_iter()
        .map(|d| d.grasp)
        .collect()
}

fn mask_target(scene: &Scene, object_id: u32) -> Target {
    let m = &scene.mask;
    Target::Mask {
        width: m.width,
        height: m.height,
        data: m.data.iter().map(|&x| x == object_id as u16 + 1).collect(),
    }
}

pub fn eval_cmd(r: &Resolved) -> Result<EvalReport, CliError> {
    let root = required(&r.opts.scene, "scene")?;
    let scenes = load_scenes(root)?;
    let detector = if r.opts.oracle { None } else { Some(Detector::new(load_model(r)?, r.detect.clone())) };
    let guidance = guidance_from(&r.opts)?;
    let mut per_scene = Vec::new();
    for (id, scene, labels) in &scenes {
        if scene.objects.is_empty() {
            log::warn!("scene {id} has no objects.json; skipped");
            continue;
        }
        let objects = eval_objects(&scene.objects);
        let cloud = scene.cloud().map_err(anyhow::Error::from)?;
        let detections = match &detector {
            None => oracle_detections(labels, &r.detect),
            Some(d) => match d.detect(&cloud, &guidance) {
                Ok(det) => det.grasp_list(),
                Err(PipelineError::NoRegions) => Vec::new(),
                Err(e) => return Err(CliError::Other(e.into())),
            },
        };
        let report = average_precision(&detections, &objects, AP_TOP_K, &DEFAULT_GRADES);
        let toap = if r.opts.toap {
            Some(scene_toap(scene, labels, detector.as_ref(), &cloud, &objects, r)?)
        } else {
            None
        };
        per_scene.push(SceneEval::new(id, &report, toap));
    }
    if per_scene.is_empty() {
        return Err(CliError::NoScenes);
    }
    let report = EvalReport::from_scenes(per_scene);
    let out = r.opts.out.clone().unwrap_or_else(|| PathBuf::from("eval.json"));
    write_json(&out, &report)?;
    let csv = sibling(&out, "csv");
    std::fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    match report.toap {
        Some(t) => println!("ap {:.4} toap {:.4} scenes {}", report.ap, t, report.per_scene.len()),
        None => println!("ap {:.4} scenes {}", report.ap, report.per_scene.len()),
    }
    Ok(report)
}

/// Mean TOAP over the scene's visible objects, each targeted by its mask.
fn scene_toap(
    scene: &Scene,
    labels: &SceneLabels,
    detector: Option<&Detector>,
    cloud: &SceneCloud,
    objects: &[flexlog::eval::EvalObject],
    r: &Resolved,
) -> anyhow::Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for obj in &scene.objects {
        let detections = match detector {
            None => {
                let own = SceneLabels {
                    grasps: labels.grasps.iter().filter(|l| l.object_id == obj.id).copied().collect(),
                };
                oracle_detections(&own, &r.detect)
            }
            Some(d) => match d.detect(cloud, &Guidance::Target(mask_target(scene, obj.id))) {
                Ok(det) => det.grasp_list(),
                Err(PipelineError::NoRegions | PipelineError::Guidance(GuidanceError::EmptyTarget)) => continue,
                Err(e) => return Err(e.into()),
            },
        };
        sum += target_oriented_ap(&detections, objects, obj.id, TOAP_TOP_K, TAU_TARGET, &DEFAULT_GRADES)?.ap;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Writes one spliced heatmap per region count; returns `(k, painted)` pairs.
pub fn heatmap_cmd(r: &Resolved) -> Result<Vec<(usize, usize)>, CliError> {
    let dir = required(&r.opts.scene, "scene")?;
    let (scene, _) = load_scene(dir).with_context(|| format!("loading {}", dir.display()))?;
    let cloud = scene.cloud().map_err(anyhow::Error::from)?;
    let detector = Detector::new(load_model(r)?, r.detect.clone());
    let ks: Vec<usize> = r
        .opts
        .ks
        .as_deref()
        .unwrap_or("12,48,192")
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .context("--ks must be comma-separated integers")?;
    let guide = match r.opts.mode.as_deref() {
        Some("heatmap") => Some(Heatmap::load_png(required(&r.opts.guidance, "guidance")?).map_err(anyhow::Error::from)?),
        None | Some("grid") => None,
        Some(m) => return Err(anyhow!("heatmap sweep supports grid or heatmap guidance, not {m}").into()),
    };
    let out = r.opts.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut counts = Vec::new();
    for &k in &ks {
        let centers = match &guide {
            Some(map) => centers_from_heatmap(map, &cloud, k, r.detect.local_max_window).map_err(anyhow::Error::from)?,
            None => scene_fps_centers(&cloud, k),
        };
        let det: Detection = detector.detect_at(&cloud, &centers).map_err(detection_error)?;
        let splice = det
            .splice(cloud.width(), cloud.height(), DEFAULT_SPLICE_RADIUS_PX)
            .map_err(anyhow::Error::from)?;
        let path = out.join(format!("heatmap_k{k}.png"));
        splice.map.save_png(&path).map_err(anyhow::Error::from)?;
        println!("k {k} painted {} -> {}", splice.painted, path.display());
        counts.push((k, splice.painted));
    }
    Ok(counts)
}
