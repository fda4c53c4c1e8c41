use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use sqs_core::finetune::{evaluate_task, load_task, prepare_examples, run_finetune, train_subset_len, TaskModel};
use sqs_core::pretrain::{load_training_checkpoint, run_pretrain};
use sqs_core::render::image_io::{write_pfm, write_ppm};
use sqs_core::render::{self as raster, RenderSettings};
use sqs_core::scene::{
    bake_ground_truth, generate_scene, list_scene_dirs, read_scene_dir, sparsify_depth, write_scene_dir,
};
use sqs_core::verify::{run_suite, SuiteOptions};
use sqs_core::{Scene, SceneSample, SqsModel};

use crate::config::RunConfig;
use crate::CliError;

/// Seed of scene `i` in a dataset generated with `seed`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let out = &cfg.out_dir;
    if is_nonempty_dir(out) {
        if !force {
            return Err(CliError::Usage(format!(
                "{} exists and is not empty; pass --force to replace it",
                out.display()
            )));
        }
        fs::remove_dir_all(out)?;
    }
    let seed = cfg.seed.unwrap_or(0);
    let spec = cfg.scene_spec()?;
    let keep = cfg.scene.depth_keep_rate;
    (0..cfg.scene.n_scenes)
        .into_par_iter()
        .try_for_each(|i| -> Result<(), CliError> {
            let s = scene_seed(seed, i);
            let scene = generate_scene(&spec, s)?;
            let sample = sparsify_depth(&bake_ground_truth(&scene)?, keep, s ^ 0x5a5a_5a5a)?;
            write_scene_dir(&out.join("scenes").join(format!("scene_{i:04}")), &scene, &sample)?;
            Ok(())
        })?;
    cfg.echo()?;
    println!(
        "wrote {} scenes to {}",
        cfg.scene.n_scenes,
        out.join("scenes").display()
    );
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Vec<(Scene, SceneSample)>, CliError> {
    let dirs = list_scene_dirs(&cfg.data_dir)
        .map_err(|_| CliError::Usage(format!("no dataset at {} (run gen-data first)", cfg.data_dir.display())))?;
    if dirs.is_empty() {
        return Err(CliError::Usage(format!(
            "dataset {} holds no scenes",
            cfg.data_dir.display()
        )));
    }
    let data: Vec<(Scene, SceneSample)> = dirs
        .par_iter()
        .map(|d| read_scene_dir(d).map_err(CliError::from))
        .collect::<Result<_, _>>()?;
    for (i, (_, s)) in data.iter().enumerate() {
        check_sample(cfg, s, &dirs[i])?;
    }
    Ok(data)
}

fn check_sample(cfg: &RunConfig, s: &SceneSample, dir: &Path) -> Result<(), CliError> {
    let ok = s.n_views() == cfg.scene.n_views
        && s.cameras
            .iter()
            .all(|c| c.width == cfg.scene.width && c.height == cfg.scene.height);
    if !ok {
        return Err(CliError::Usage(format!(
            "{} does not match the configured {} views of {}x{}",
            dir.display(),
            cfg.scene.n_views,
            cfg.scene.width,
            cfg.scene.height
        )));
    }
    Ok(())
}

/// Splits off the trailing `eval_scenes` scenes (at least one scene stays
/// for training).
fn split<T>(cfg: &RunConfig, data: Vec<T>) -> Result<(Vec<T>, Vec<T>), CliError> {
    let n = data.len();
    if n <= cfg.finetune.eval_scenes {
        return Err(CliError::Usage(format!(
            "dataset has {n} scenes but finetune.eval_scenes holds out {}",
            cfg.finetune.eval_scenes
        )));
    }
    let mut train = data;
    let eval = train.split_off(n - cfg.finetune.eval_scenes);
    Ok((train, eval))
}

pub fn pretrain(cfg: &RunConfig, dry_run: bool, resume: Option<&Path>) -> Result<(), CliError> {
    if dry_run {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let (train, _) = split(cfg, load_dataset(cfg)?)?;
    let samples: Vec<SceneSample> = train.into_iter().map(|(_, s)| s).collect();
    if let Some(r) = resume {
        if !r.exists() {
            return Err(CliError::Usage(format!("resume checkpoint {} not found", r.display())));
        }
    }
    cfg.echo()?;
    let mut model = SqsModel::init(cfg.model_config()?, cfg.seed.unwrap_or(0))?;
    let summary = run_pretrain(&mut model, &samples, &cfg.pretrain_config()?, &cfg.out_dir, resume)?;
    if let (Some(first), Some(last)) = (summary.losses.first(), summary.losses.last()) {
        println!("loss {first:.6} -> {last:.6} over {} steps", summary.losses.len());
    }
    println!("checkpoint {}", summary.final_checkpoint.display());
    Ok(())
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<SqsModel, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", path.display())));
    }
    let mut model = SqsModel::init(cfg.model_config()?, 0)?;
    load_training_checkpoint(path, &mut model)?;
    Ok(model)
}

pub fn render(cfg: &RunConfig, checkpoint: &Path, scene_dir: &Path) -> Result<(), CliError> {
    let model = load_model(cfg, checkpoint)?;
    let (_, sample) = read_scene_dir(scene_dir)?;
    check_sample(cfg, &sample, scene_dir)?;
    cfg.echo()?;
    let mut g = sqs_core::Graph::new();
    let out = model.forward(&mut g, &sample.rgb, &sample.cameras, false)?;
    let s = out.splats;
    let (prims, degenerate) = sqs_core::decoder::primitives_from_splats(
        g.value(s.means),
        g.value(s.quats),
        g.value(s.scales),
        g.value(s.opacities),
        g.value(s.colors),
    );
    if degenerate > 0 {
        log::warn!("{degenerate} decoded quaternions were degenerate");
    }
    let dir = cfg.out_dir.join("render");
    fs::create_dir_all(&dir)?;
    for (k, cam) in sample.cameras.iter().enumerate() {
        let (r, _) = raster::render(&prims, cam, &RenderSettings::default())?;
        let (w, h) = (cam.width, cam.height);
        write_ppm(&dir.join(format!("view{k}.ppm")), &r.rgb, w, h)?;
        write_pfm(&dir.join(format!("view{k}.pfm")), &r.depth, w, h)?;
        write_ppm(&dir.join(format!("gt_view{k}.ppm")), &sample.rgb[k], w, h)?;
        write_pfm(&dir.join(format!("gt_view{k}.pfm")), &sample.depth[k], w, h)?;
    }
    println!("wrote {} views to {}", sample.n_views(), dir.display());
    Ok(())
}

pub fn finetune(cfg: &RunConfig, pretrained: &Path) -> Result<(), CliError> {
    let model = load_model(cfg, pretrained)?;
    let (train, _) = split(cfg, load_dataset(cfg)?)?;
    let n = train_subset_len(train.len(), cfg.finetune.train_fraction)?;
    let train = &train[..n];
    cfg.echo()?;
    let task_cfg = cfg.task_config(cfg.finetune.interaction);
    let mut task = TaskModel::init(task_cfg.clone(), &model, cfg.seed.unwrap_or(0))?;
    let examples = prepare_examples(&model, train, &task_cfg)?;
    let summary = run_finetune(&mut task, &examples, &cfg.finetune_config(), &cfg.out_dir)?;
    if let Some(last) = summary.stats.last() {
        println!(
            "{} scenes, final loss {:.6}, iou_occupied {:.4}, miou {:.4}",
            n,
            last.loss,
            last.iou.occupied(),
            last.iou.miou
        );
    }
    println!("task checkpoint {}", summary.checkpoint.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, pretrained: &Path, task_path: &Path) -> Result<(), CliError> {
    let model = load_model(cfg, pretrained)?;
    if !task_path.exists() {
        return Err(CliError::Usage(format!(
            "task checkpoint {} not found",
            task_path.display()
        )));
    }
    let (_, held_out) = split(cfg, load_dataset(cfg)?)?;
    cfg.echo()?;
    let task_cfg = cfg.task_config(cfg.finetune.interaction);
    let task = load_task(task_path, task_cfg.clone(), &model)?;
    let examples = prepare_examples(&model, &held_out, &task_cfg)?;
    let report = evaluate_task(&task, &examples)?;
    let mut csv = String::from("class,iou\n");
    for (c, iou) in report.per_class.iter().enumerate() {
        let name = ["empty", "occupied"][c];
        match iou {
            Some(v) => writeln!(csv, "{name},{v}"),
            None => writeln!(csv, "{name},"),
        }
        .expect("string write");
    }
    writeln!(csv, "miou,{}", report.miou).expect("string write");
    fs::write(cfg.out_dir.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, per_group: usize, negate: bool) -> Result<(), CliError> {
    cfg.echo()?;
    let reports = run_suite(&SuiteOptions {
        seed: cfg.seed.unwrap_or(0),
        negate_analytic: negate,
        per_group,
    })?;
    let mut text = String::new();
    for r in &reports {
        writeln!(
            text,
            "{:<12} {:<26} max_rel_err {:.3e} checked {:>3} {}",
            r.component,
            r.group,
            r.max_relative_error,
            r.checked,
            if r.passed() { "ok" } else { "FAIL" }
        )
        .expect("string write");
    }
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for r in &reports {
        match worst.iter_mut().find(|(c, _)| *c == r.component) {
            Some(w) => w.1 = w.1.max(r.max_relative_error),
            None => worst.push((r.component, r.max_relative_error)),
        }
    }
    for (c, e) in &worst {
        writeln!(text, "{c}: max relative error {e:.3e}").expect("string write");
    }
    fs::write(cfg.out_dir.join("gradcheck.txt"), &text)?;
    print!("{text}");
    if reports.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed (tolerance {:.0e})",
            sqs_core::verify::TOLERANCE
        )))
    }
}
