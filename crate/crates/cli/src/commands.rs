use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use highmmt_core::analysis::{
    attention_sums, calibrate_epsilon, count_distribution, involvement, write_count_distribution,
    write_grid, write_interference, write_param_report, InterferenceReport, InvolvementTable,
    DEFAULT_EPSILON,
};
use highmmt_core::checkpoint::{load_model, save_model};
use highmmt_core::config::{Granularity, RunMode};
use highmmt_core::model::{parameter_count, Component, Model, SharingConfig, Variant};
use highmmt_core::synthbench::{gen_fusion_task, gen_retrieval_task, write_dataset};
use highmmt_core::training::{
    build_schedule, fewshot_train, pretrain_finetune, record_test_metrics, save_state,
    train_multitask, write_metrics_csv, Selection, TaskData, TaskSpec, TrainConfig, TrainState,
    Trainable,
};
use highmmt_core::Error;
use serde::Serialize;

use crate::context::Context;
use crate::{Common, Kind};

fn new_model(ctx: &Context, sharing: SharingConfig, tasks: &[TaskSpec]) -> Result<Model> {
    Ok(Model::new(
        ctx.cfg.model_config(),
        sharing,
        ctx.registry.clone(),
        tasks.iter().map(TaskSpec::head).collect(),
    )?)
}

fn refs(data: &[TaskData]) -> Vec<&TaskData> {
    data.iter().collect()
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn gen_data(common: &Common) -> Result<()> {
    let ctx = Context::new(common, "gen-data")?;
    let dir = ctx.cfg.data_dir();
    if ctx.cfg.data.fusion.is_empty() && ctx.cfg.data.retrieval.is_empty() {
        return Err(Error::Config(
            "the config lists no [[data.fusion]] or [[data.retrieval]] entries".into(),
        )
        .into());
    }
    ctx.fresh_dir(&dir)?;
    let mut names = Vec::new();
    for e in &ctx.cfg.data.fusion {
        let ds = gen_fusion_task(&ctx.cfg.fusion_config(e)?)?;
        write_dataset(dir.join(&e.task), &ds)?;
        println!(
            "{}: {} / {} / {} samples",
            e.task,
            ds.train.len(),
            ds.valid.len(),
            ds.test.len()
        );
        names.push(e.task.as_str());
    }
    for e in &ctx.cfg.data.retrieval {
        let rc = ctx.cfg.retrieval_config(e)?;
        let ds = gen_retrieval_task(&rc)?.to_dataset(&rc)?;
        write_dataset(dir.join(&e.task), &ds)?;
        println!(
            "{}: {} / {} / {} pairs",
            e.task,
            ds.train.len(),
            ds.valid.len(),
            ds.test.len()
        );
        names.push(e.task.as_str());
    }
    ctx.write_manifest(&dir, &[])?;
    println!("wrote {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct ScheduleRow {
    step: usize,
    tasks: String,
}

/// Trains jointly and writes metrics, checkpoints and the step→tasks log.
fn train_into(
    dir: &Path,
    model: Model,
    specs: &[TaskSpec],
    data: &[&TaskData],
    cfg: &TrainConfig,
    selection: Selection,
) -> Result<TrainState> {
    let mut state = TrainState::new(model, cfg.lr, cfg.weight_decay);
    train_multitask(&mut state, specs, data, cfg, selection)?;
    record_test_metrics(&mut state, specs, data, cfg)?;
    write_metrics_csv(&state.history, dir.join("metrics.csv"))?;
    save_model(&state.best_model, dir.join("best.ckpt"))?;
    save_state(&state, dir.join("state.ckpt"))?;
    let rows: Vec<ScheduleRow> = state
        .last_schedule
        .iter()
        .enumerate()
        .map(|(i, t)| ScheduleRow {
            step: i + 1,
            tasks: t.join(";"),
        })
        .collect();
    write_csv(&rows, &dir.join("schedule.csv"))?;
    for (s, (v, t)) in specs
        .iter()
        .zip(state.final_metrics(specs, data, cfg.eval_batch_size)?)
    {
        println!(
            "{}: best epoch {} valid {} {v:.4} test {t:.4}",
            s.name,
            state.best_epoch.unwrap_or(0),
            s.loss.metric_name()
        );
    }
    Ok(state)
}

pub fn train(common: &Common) -> Result<()> {
    let ctx = Context::new(common, "train")?;
    let names = ctx.cfg.task_names();
    let (specs, data) = ctx.load_tasks(&names)?;
    let dir = ctx.output_dir("train")?;
    let cfg = &ctx.cfg.training;
    match ctx.cfg.run.mode {
        RunMode::Multitask => {
            let counts: Vec<(String, usize)> = specs
                .iter()
                .zip(&data)
                .map(|(s, d)| (s.name.clone(), d.train.len().div_ceil(s.batch_size)))
                .collect();
            let schedule = build_schedule(&counts)?;
            println!(
                "{} steps per epoch over {} tasks",
                schedule.steps_per_epoch(),
                specs.len()
            );
            let model = new_model(&ctx, ctx.cfg.sharing(), &specs)?;
            train_into(&dir, model, &specs, &refs(&data), cfg, Selection::Aggregate)?;
        }
        RunMode::SingleTask => {
            for (s, d) in specs.iter().zip(&data) {
                let sub = dir.join(&s.name);
                fs::create_dir_all(&sub)?;
                let one = std::slice::from_ref(s);
                let model = new_model(&ctx, ctx.cfg.sharing(), one)?;
                train_into(&sub, model, one, &[d], cfg, Selection::Aggregate)?;
            }
        }
    }
    ctx.write_manifest(&dir, &ctx.dataset_inputs(&names))
}

pub fn transfer(
    common: &Common,
    sources: Option<Vec<String>>,
    target: Option<String>,
) -> Result<()> {
    let ctx = Context::new(common, "transfer")?;
    let section = ctx.cfg.transfer.clone();
    let sources = sources
        .or_else(|| section.as_ref().map(|s| s.sources.clone()))
        .unwrap_or_default();
    let target = target
        .or_else(|| section.as_ref().map(|s| s.target.clone()))
        .ok_or_else(|| Error::Config("no --target given and no [transfer] section".into()))?;
    let mut names: Vec<&str> = sources.iter().map(String::as_str).collect();
    if names.contains(&target.as_str()) {
        return Err(Error::Config(format!("`{target}` is both source and target")).into());
    }
    names.push(&target);
    let (specs, data) = ctx.load_tasks(&names)?;
    let dir = ctx.output_dir("transfer")?;
    let mut pre = ctx.cfg.training.clone();
    let mut fine = ctx.cfg.training.clone();
    if let Some(s) = &section {
        pre.epochs = s.pretrain_epochs;
        fine.epochs = s.finetune_epochs;
    }
    let n = specs.len() - 1;
    let src: Vec<(TaskSpec, &TaskData)> = specs[..n].iter().cloned().zip(&data[..n]).collect();
    let model = new_model(&ctx, ctx.cfg.sharing(), &specs)?;
    let mut state = pretrain_finetune(model, &src, (&specs[n], &data[n]), &pre, &fine)?;
    let target_spec = &specs[n..];
    record_test_metrics(&mut state, target_spec, &[&data[n]], &fine)?;
    write_metrics_csv(&state.history, dir.join("metrics.csv"))?;
    save_model(&state.best_model, dir.join("best.ckpt"))?;
    let (v, t) = state.final_metrics(target_spec, &[&data[n]], fine.eval_batch_size)?[0];
    println!(
        "{} <- [{}]: valid {v:.4} test {t:.4}",
        target,
        sources.join(", ")
    );
    ctx.write_manifest(&dir, &ctx.dataset_inputs(&names))
}

#[derive(Serialize)]
struct FewshotRow<'a> {
    mode: &'a str,
    task: &'a str,
    p: f64,
    seed: u64,
    valid: f64,
    test: f64,
}

pub fn fewshot(common: &Common, p: Option<f64>) -> Result<()> {
    let ctx = Context::new(common, "fewshot")?;
    let section = ctx
        .cfg
        .fewshot
        .clone()
        .ok_or_else(|| Error::Config("no [fewshot] section".into()))?;
    let p = p.unwrap_or(section.p);
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("--p must lie in (0, 1], got {p}")).into());
    }
    let aux: Vec<String> = section.auxiliary.clone().unwrap_or_else(|| {
        ctx.cfg
            .task_names()
            .into_iter()
            .filter(|n| *n != section.target)
            .map(String::from)
            .collect()
    });
    let mut names = vec![section.target.as_str()];
    names.extend(aux.iter().map(String::as_str));
    let (specs, data) = ctx.load_tasks(&names)?;
    let dir = ctx.output_dir("fewshot")?;
    let cfg = &ctx.cfg.training;
    let target = (&specs[0], &data[0]);
    let aux_pairs: Vec<(TaskSpec, &TaskData)> =
        specs[1..].iter().cloned().zip(&data[1..]).collect();

    let mut rows = Vec::new();
    for (mode, aux) in [("single", &[][..]), ("multitask", &aux_pairs[..])] {
        let mut heads = vec![specs[0].clone()];
        heads.extend(aux.iter().map(|(s, _)| s.clone()));
        let model = new_model(&ctx, ctx.cfg.sharing(), &heads)?;
        let state = fewshot_train(model, aux, target, p, section.boost, cfg)?;
        write_metrics_csv(&state.history, dir.join(format!("metrics_{mode}.csv")))?;
        let (valid, test) = state.final_metrics(&specs[..1], &[&data[0]], cfg.eval_batch_size)?[0];
        println!(
            "{mode}: {} at p = {p}: valid {valid:.4} test {test:.4}",
            section.target
        );
        rows.push(FewshotRow {
            mode,
            task: &section.target,
            p,
            seed: cfg.seed,
            valid,
            test,
        });
    }
    write_csv(&rows, &dir.join("summary.csv"))?;
    ctx.write_manifest(&dir, &ctx.dataset_inputs(&names))
}

#[derive(Serialize)]
struct AblationRow<'a> {
    variant: &'a str,
    parameters: usize,
    task: &'a str,
    head_width: usize,
    valid: f64,
    test: f64,
}

pub fn ablate(common: &Common, variant: Option<&str>) -> Result<()> {
    let ctx = Context::new(common, "ablate")?;
    let variants: Vec<Variant> = match variant {
        Some(v) => vec![v.parse()?],
        None => Variant::ALL.to_vec(),
    };
    let names = ctx.cfg.task_names();
    let (specs, data) = ctx.load_tasks(&names)?;
    let dir = ctx.output_dir("ablate")?;
    let cfg = &ctx.cfg.training;
    let mut rows = Vec::new();
    for v in &variants {
        let sub = dir.join(v.name());
        fs::create_dir_all(&sub)?;
        let model = new_model(&ctx, v.sharing(), &specs)?;
        let parameters = parameter_count(&model).total();
        let widths: Vec<usize> = specs
            .iter()
            .map(|s| model.head_input_width(s.modalities.len()))
            .collect();
        for (s, w) in specs.iter().zip(&widths) {
            let k = s.modalities.len();
            println!(
                "{v}: head input width of {} = {w} ({k} modalities, stream width {})",
                s.name,
                model.stream_width()
            );
        }
        println!("{v}: {parameters} parameters");
        let state = train_into(&sub, model, &specs, &refs(&data), cfg, Selection::Aggregate)?;
        for ((s, w), (valid, test)) in specs.iter().zip(widths).zip(state.final_metrics(
            &specs,
            &refs(&data),
            cfg.eval_batch_size,
        )?) {
            rows.push((v.name(), parameters, s.name.clone(), w, valid, test));
        }
    }
    let rows: Vec<AblationRow> = rows
        .iter()
        .map(
            |(variant, parameters, task, head_width, valid, test)| AblationRow {
                variant,
                parameters: *parameters,
                task,
                head_width: *head_width,
                valid: *valid,
                test: *test,
            },
        )
        .collect();
    write_csv(&rows, &dir.join("summary.csv"))?;
    ctx.write_manifest(&dir, &ctx.dataset_inputs(&names))
}

pub fn analyze(common: &Common, kind: Kind, checkpoint: Option<PathBuf>) -> Result<()> {
    let ctx = Context::new(common, "analyze")?;
    match kind {
        Kind::Params => analyze_params(&ctx),
        Kind::Interference => analyze_interference(&ctx),
        Kind::Involvement | Kind::Attention => {
            let path =
                checkpoint.unwrap_or_else(|| ctx.cfg.run.out.join("train").join("best.ckpt"));
            let model = load_model(&path).with_context(|| format!("loading {}", path.display()))?;
            let names: Vec<String> = model.tasks().iter().map(|t| t.name.clone()).collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let (specs, data) = ctx.load_tasks(&names)?;
            let mut inputs = ctx.dataset_inputs(&names);
            inputs.push(path);
            let dir = match kind {
                Kind::Involvement => {
                    let dir = ctx.output_dir("analyze/involvement")?;
                    analyze_involvement(&ctx, &dir, &model, &specs, &data)?;
                    dir
                }
                _ => {
                    let dir = ctx.output_dir("analyze/attention")?;
                    analyze_attention(&ctx, &dir, &model, &specs, &data)?;
                    dir
                }
            };
            ctx.write_manifest(&dir, &inputs)
        }
    }
}

fn analyze_params(ctx: &Context) -> Result<()> {
    let dir = ctx.output_dir("analyze/params")?;
    let specs = &ctx.cfg.tasks;
    let shared = parameter_count(&new_model(ctx, ctx.cfg.sharing(), specs)?);
    let separate = parameter_count(&new_model(ctx, Variant::Separate.sharing(), specs)?);
    let mut reports = vec![
        ("multitask".to_string(), shared.clone()),
        ("separate".to_string(), separate.clone()),
    ];
    let mut single_sum = 0;
    for s in specs {
        let r = parameter_count(&new_model(ctx, ctx.cfg.sharing(), std::slice::from_ref(s))?);
        single_sum += r.total();
        reports.push((format!("single:{}", s.name), r));
    }
    write_param_report(&reports, dir.join("params.csv"))?;
    let n = specs.len() as f64;
    println!("shared multitask: {}", shared.total());
    println!(
        "separate: {} (ratio {:.3}, {} tasks)",
        separate.total(),
        separate.total() as f64 / shared.total() as f64,
        specs.len()
    );
    println!(
        "sum of single-task models: {single_sum} (ratio {:.3}; shared x {} = {:.0})",
        single_sum as f64 / shared.total() as f64,
        specs.len(),
        shared.total() as f64 * n
    );
    ctx.write_manifest(&dir, &[])
}

#[derive(Serialize)]
struct CalibrationOut {
    epsilon: f64,
    calibrated: bool,
    active_fraction: Option<f64>,
    qualified: Option<bool>,
    granularity: Granularity,
}

#[derive(Serialize)]
struct InvolvementRow<'a> {
    tensor: &'a str,
    task: &'a str,
    involvement: f64,
}

fn analyze_involvement(
    ctx: &Context,
    dir: &Path,
    model: &Model,
    specs: &[TaskSpec],
    data: &[TaskData],
) -> Result<()> {
    let a = &ctx.cfg.analysis;
    let per_task = specs
        .iter()
        .zip(data)
        .map(|(s, d)| {
            Ok((
                s.name.clone(),
                involvement(model, s, &d.valid, a.max_samples)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = InvolvementTable::new(model.params(), per_task)?;
    let per_tensor = table.per_tensor();
    let table = match a.granularity {
        Granularity::Scalar => table,
        Granularity::Tensor => per_tensor.clone(),
    };
    let cal = match a.epsilon {
        Some(epsilon) => CalibrationOut {
            epsilon,
            calibrated: false,
            active_fraction: None,
            qualified: None,
            granularity: a.granularity,
        },
        None if table.tasks.len() >= 2 => {
            let c = calibrate_epsilon(&table)?;
            CalibrationOut {
                epsilon: c.epsilon,
                calibrated: true,
                active_fraction: Some(c.active_fraction),
                qualified: Some(c.qualified),
                granularity: a.granularity,
            }
        }
        None => CalibrationOut {
            epsilon: DEFAULT_EPSILON,
            calibrated: false,
            active_fraction: None,
            qualified: None,
            granularity: a.granularity,
        },
    };
    let dists = count_distribution(&table, cal.epsilon, |n| Component::of(n).name().to_string());
    write_count_distribution(&dists, dir.join("count_distribution.csv"))?;
    fs::write(
        dir.join("calibration.json"),
        serde_json::to_string_pretty(&cal)? + "\n",
    )?;
    let mut rows = Vec::new();
    for (t, task) in per_tensor.tasks.iter().enumerate() {
        for (r, (tensor, _)) in per_tensor.tensors.iter().enumerate() {
            rows.push(InvolvementRow {
                tensor,
                task,
                involvement: per_tensor.values[t][r],
            });
        }
    }
    write_csv(&rows, &dir.join("per_tensor.csv"))?;
    println!("epsilon {}", cal.epsilon);
    for d in &dists {
        let f: Vec<String> = d.fractions().iter().map(|x| format!("{x:.3}")).collect();
        println!("{}: task-count fractions [{}]", d.component, f.join(", "));
    }
    Ok(())
}

fn analyze_attention(
    ctx: &Context,
    dir: &Path,
    model: &Model,
    specs: &[TaskSpec],
    data: &[TaskData],
) -> Result<()> {
    for (s, d) in specs.iter().zip(data) {
        for sum in attention_sums(model, &s.name, &d.valid, ctx.cfg.analysis.attention_batch)? {
            let modality = &model.registry().spec(sum.modality).name;
            let file = format!("attention.{}.{}.t{}.csv", s.name, modality, sum.seq_len);
            write_grid(&sum.mean(), dir.join(&file))?;
            println!("{file}: {} samples", sum.count);
        }
    }
    Ok(())
}

fn analyze_interference(ctx: &Context) -> Result<()> {
    let section = ctx
        .cfg
        .interference
        .clone()
        .ok_or_else(|| Error::Config("no [interference] section".into()))?;
    let names = ctx.cfg.task_names();
    let (specs, data) = ctx.load_tasks(&names)?;
    let data = refs(&data);
    let dir = ctx.output_dir("analyze/interference")?;
    let train = &ctx.cfg.training;
    let start = |sharing: SharingConfig| -> Result<Model> {
        let model = new_model(ctx, sharing, &specs)?;
        if section.pretrain_epochs == 0 {
            return Ok(model);
        }
        let mut pre = train.clone();
        pre.epochs = section.pretrain_epochs;
        let mut state = TrainState::new(model, pre.lr, pre.weight_decay);
        train_multitask(&mut state, &specs, &data, &pre, Selection::Aggregate)?;
        Ok(state.model)
    };
    let run = |model: &Model, regime, label: &str| -> Result<InterferenceReport> {
        let mut cfg = train.clone();
        cfg.epochs = section.epochs;
        cfg.trainable = regime;
        let r = InterferenceReport::build(model, &specs, &data, section.flip_seed, &cfg)?;
        for (f, row) in r.flipped.iter().zip(&r.deltas) {
            let cells: Vec<String> = r
                .tasks
                .iter()
                .zip(row)
                .map(|(t, d)| format!("{t} {d:+.4}"))
                .collect();
            println!("{label}: flip {f}: {}", cells.join(", "));
        }
        Ok(r)
    };
    let shared = start(ctx.cfg.sharing())?;
    let reports = section
        .regimes
        .iter()
        .map(|&r| run(&shared, r, &format!("{r:?}").to_lowercase()))
        .collect::<Result<Vec<_>>>()?;
    write_interference(&reports, dir.join("interference.csv"))?;
    if section.control {
        let control = start(Variant::Separate.sharing())?;
        let r = run(&control, Trainable::All, "control")?;
        write_interference(&[r], dir.join("interference_control.csv"))?;
    }
    ctx.write_manifest(&dir, &ctx.dataset_inputs(&names))
}
