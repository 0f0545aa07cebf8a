use std::path::Path;

use anyhow::{bail, Context, Result};
use gazekit::bench::{compare, measure_latency, samples_csv, BenchOptions};
use gazekit::detect::{detect_at_gaze, load_grid, Thresholds};
use gazekit::distill::{write_loss_csv, DistillConfig, Distiller};
use gazekit::gaze::{
    as_batch, evaluate, kmeans_cluster, personalize, to_gazes, train_generalized, GazeDataset,
    PersonalizeInputs, Split, TrainConfig, PERSONAL_SHOTS,
};
use gazekit::io::{
    load_dataset, load_model, read_image, read_tensors, resize_bilinear, save_weights,
    synth_generate, LoadOptions, SyntheticEyeConfig,
};
use gazekit::model::{
    attach_adapters, build_student_from_teacher, build_teacher, Decoders, GazeModel, ModelConfig,
};
use gazekit::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{
    BenchArgs, Command, DetectArgs, DistillArgs, EvalArgs, PersonalizeArgs, PredictArgs, SynthArgs,
    TrainArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Distill(a) => distill(a),
        Command::Train(a) => train(a),
        Command::Personalize(a) => personalize_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Detect(a) => detect(a),
        Command::Bench(a) => bench(a),
    }
}

fn model_at(path: &Path) -> Result<GazeModel> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn dataset(path: &Path, resolution: Option<usize>, split: Option<Split>) -> Result<GazeDataset> {
    load_dataset(path, &LoadOptions { resolution, split })
        .with_context(|| format!("loading {}", path.display()))
}

fn train_config(base: TrainConfig, file: Option<&Path>) -> Result<TrainConfig> {
    match file {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(base.apply_kv(&text)?)
        }
        None => Ok(base),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let config = SyntheticEyeConfig {
        resolution: a.resolution,
        seed: a.seed.seed,
        personal_subjects: a.personal,
        ..SyntheticEyeConfig::default()
    };
    let data = synth_generate(&config, a.subjects, a.per_subject, &a.out)?;
    println!("{} images written to {}", data.len(), a.out.display());
    Ok(())
}

fn distill(a: DistillArgs) -> Result<()> {
    let seed = a.seed.seed;
    let teacher = match &a.teacher {
        Some(p) => model_at(p)?,
        None => {
            eprintln!("no --teacher given, using a seed-initialized teacher");
            build_teacher(ModelConfig::teacher(), seed)?
        }
    };
    let student = build_student_from_teacher(&teacher, seed.wrapping_add(1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let patch = student.config.total_stride();
    let decoders = Decoders::new(&student.config, &teacher.config, patch, &mut rng)?;
    let data = dataset(&a.data, a.resolution, Some(Split::Train))?;
    let images: Vec<&Tensor> = data.samples.iter().map(|s| &s.image).collect();
    let config = DistillConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        mask_ratio: a.mask_ratio,
        patch_size: patch,
        seed,
        max_steps: a.max_steps,
        ..DistillConfig::default()
    };
    let mut distiller = Distiller::from_samples(&teacher, student, decoders, &images, config)?;
    if let Some(p) = &a.resume {
        distiller.restore(&read_tensors(p)?)?;
    }
    let first_step = distiller.step + 1;
    let total = distiller.total_steps();
    let losses = distiller.run(|step, l| {
        if step == first_step || step % 10 == 0 || step == total {
            eprintln!("step {step}/{total} loss {:.5}", l.total);
        }
    })?;
    if let Some(p) = &a.loss_csv {
        write_loss_csv(p, &losses, first_step)?;
    }
    if let Some(p) = &a.checkpoint {
        let entries = distiller.checkpoint_tensors();
        gazekit::io::write_tensors(p, entries.iter().map(|(n, t)| (n.as_str(), t)))?;
    }
    save_weights(&distiller.student, &a.out)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!(
            "loss {:.5} -> {:.5} over {} steps",
            first.total,
            last.total,
            losses.len()
        );
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut model = model_at(&a.model)?;
    if !model.has_adapters() {
        attach_adapters(&mut model, a.seed.seed)?;
    }
    let mut config = train_config(TrainConfig::default(), a.config.as_deref())?;
    config.seed = a.seed.seed;
    config.lr = a.lr.unwrap_or(config.lr);
    config.epochs = a.epochs.unwrap_or(config.epochs);
    config.batch_size = a.batch_size.unwrap_or(config.batch_size);
    let all = dataset(&a.data, a.resolution, None)?;
    let train = all.split(Split::Train);
    let val = all.split(Split::Val);
    println!("epoch,loss");
    let report = train_generalized(&mut model, &train, Some(&val), &config, |e, l| {
        println!("{e},{l}")
    })?;
    save_weights(&model, &a.out)?;
    eprintln!("tunable parameters {}", report.tunable_params);
    if let Some(v) = report.val {
        eprintln!(
            "val mean {:.3} deg, median {:.3} deg over {}",
            v.mean_deg, v.median_deg, v.n
        );
    }
    Ok(())
}

fn personalize_cmd(a: PersonalizeArgs) -> Result<()> {
    let mut model = model_at(&a.model)?;
    let mut config = train_config(TrainConfig::personalization(), a.config.as_deref())?;
    config.seed = a.seed.seed;
    config.lr = a.lr.unwrap_or(config.lr);
    config.epochs = a.epochs.unwrap_or(config.epochs);
    config.replay_r = a.replay_r.unwrap_or(config.replay_r);
    let personal = dataset(&a.personal, a.resolution, None)?.subject(&a.subject);
    if personal.len() < PERSONAL_SHOTS {
        bail!(
            "subject `{}` has {} images, personalization needs {PERSONAL_SHOTS}",
            a.subject,
            personal.len()
        );
    }
    let holdout = GazeDataset::new(personal.samples[PERSONAL_SHOTS..].to_vec());
    let general = dataset(&a.replay, a.resolution, None)?;
    let replay = general.split(Split::Train);
    let general_val = general.split(Split::Val);
    if replay.is_empty() {
        bail!("replay manifest has no train records");
    }
    let clusters = kmeans_cluster(&replay, config.clusters.min(replay.len()), config.seed)?;
    let inputs = PersonalizeInputs {
        personal: &personal.samples[..PERSONAL_SHOTS],
        replay: &replay,
        clusters: &clusters,
        holdout: Some(&holdout),
        general_val: Some(&general_val),
        personal_val: None,
    };
    let report = personalize(&mut model, &inputs, &config)?;
    save_weights(&model, &a.out)?;
    println!("metric,before,after");
    let mean = |r: &Option<gazekit::gaze::EvalReport>| r.as_ref().map_or(f64::NAN, |r| r.mean_deg);
    println!(
        "subject_mean_deg,{},{}",
        mean(&report.holdout_before),
        mean(&report.holdout_after)
    );
    println!(
        "general_mean_deg,{},{}",
        mean(&report.general_before),
        mean(&report.general_after)
    );
    eprintln!(
        "tunable parameters {}, {} epochs",
        report.tunable_params, report.epochs_run
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = model_at(&a.model)?;
    let split = a.split.as_deref().map(str::parse::<Split>).transpose()?;
    let data = dataset(&a.data, a.resolution, split)?;
    let report = evaluate(&model, &data)?;
    report.write_csv(&a.report)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = model_at(&a.model)?;
    let mut image =
        read_image(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    if let Some(r) = a.resolution {
        image = resize_bilinear(&image, r, r)?;
    }
    let batch = as_batch(&image)?;
    let gaze = to_gazes(&model.forward_gaze(&batch)?)[0];
    println!("{},{}", gaze.pitch, gaze.yaw);
    Ok(())
}

fn parse_point(text: &str) -> Result<(f32, f32)> {
    let (x, y) = text
        .split_once(',')
        .with_context(|| format!("gaze must be X,Y, got `{text}`"))?;
    Ok((x.trim().parse()?, y.trim().parse()?))
}

fn detect(a: DetectArgs) -> Result<()> {
    let grid = load_grid(&a.grid, a.stride)?;
    let gaze = parse_point(&a.gaze)?;
    let found = detect_at_gaze(
        &grid,
        gaze,
        a.k,
        Thresholds {
            score: a.score,
            iou: a.iou,
        },
    )?;
    if found.clamped {
        eprintln!(
            "warning: gaze {:?} lies outside the image, clamped to cell {:?}",
            gaze, found.center
        );
    }
    for b in &found.boxes {
        println!("{}", b.to_json());
    }
    eprintln!(
        "cells examined {} of {}",
        found.cells_examined, found.total_cells
    );
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let options = BenchOptions {
        n_runs: a.runs,
        warmup: a.warmup,
        threads: a.threads,
    };
    let model = model_at(&a.model)?;
    let shape = [1, model.config.in_channels, a.resolution, a.resolution];
    let name = a
        .model
        .file_stem()
        .map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let (report, samples) = measure_latency(&name, &model, &shape, options)?;
    if let Some(p) = &a.csv {
        std::fs::write(p, samples_csv(&samples))?;
    }
    if let Some(p) = &a.json {
        std::fs::write(p, report.to_json())?;
    }
    match &a.compare {
        Some(other) => {
            let second = model_at(other)?;
            let name = other
                .file_stem()
                .map_or("other".into(), |s| s.to_string_lossy().into_owned());
            let (second_report, _) = measure_latency(&name, &second, &shape, options)?;
            print!("{}", compare(&report, &second_report).table);
        }
        None => println!("{}", report.to_json()),
    }
    Ok(())
}
