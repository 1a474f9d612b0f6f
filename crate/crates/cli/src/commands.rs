use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use mkpn::bench::{bench_reconstruction, ReconBench};
use mkpn::corpus::{load_sources, procedural_corpus};
use mkpn::dataset::{discover_testsets, load_sample, read_manifest, write_testset};
use mkpn::eval::{denoise as run_denoise, evaluate, score, Mode};
use mkpn::imageio::{save_png, side_by_side};
use mkpn::train::{loss_csv_line, smoothed_losses, LossRecord, LOSS_CSV_HEADER};
use mkpn::{
    BurstSample, Checkpoint, Container, DType, Gain, Real, SourcePool, SyntheticStream, Trainer,
};

use crate::settings::Settings;
use crate::Failure;

const RESOLVED: &str = "resolved_config.txt";

fn echo_config(s: &Settings, dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED), s.render())?;
    Ok(())
}

fn source_pool(s: &Settings, min_extent: usize) -> Result<SourcePool, Failure> {
    Ok(match s.path("images") {
        Some(dir) => SourcePool::Images(load_sources(&dir, min_extent)?),
        None => SourcePool::Procedural,
    })
}

pub fn synth(s: &Settings, out: &Path) -> Result<(), Failure> {
    let gain = Gain::from_level(s.parse("gain")?).map_err(|e| Failure::Usage(e.to_string()))?;
    let spec = s.burst_spec()?;
    let pool = source_pool(s, spec.min_source())?;
    echo_config(s, out)?;
    let manifest = write_testset(out, gain, s.parse("count")?, s.parse("seed")?, &spec, &pool)?;
    println!(
        "wrote {} bursts (gain {}, N={}, {}px) to {}",
        manifest.entries.len(),
        gain.level(),
        spec.burst_len,
        spec.patch,
        out.display()
    );
    Ok(())
}

/// A checkpoint in whichever precision it was stored.
enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

fn load_checkpoint(path: &Path) -> Result<AnyCheckpoint, Failure> {
    let c = Container::load(path)?;
    Ok(match c.meta("dtype") {
        Some("f64") => AnyCheckpoint::F64(Checkpoint::from_container(&c)?),
        _ => AnyCheckpoint::F32(Checkpoint::from_container(&c)?),
    })
}

macro_rules! with_checkpoint {
    ($any:expr, $ck:ident => $body:expr) => {
        match $any {
            AnyCheckpoint::F32($ck) => $body,
            AnyCheckpoint::F64($ck) => $body,
        }
    };
}

pub fn train(s: &Settings, out: &Path, resume: Option<&Path>, testset: Option<&Path>) -> Result<(), Failure> {
    let dtype = match s.get("dtype") {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return Err(Failure::Usage(format!("dtype must be f32 or f64, got `{other}`"))),
    };
    match dtype {
        DType::F32 => train_typed::<f32>(s, out, resume, testset),
        DType::F64 => train_typed::<f64>(s, out, resume, testset),
    }
}

fn train_typed<T: Real>(
    s: &Settings,
    out: &Path,
    resume: Option<&Path>,
    testset: Option<&Path>,
) -> Result<(), Failure> {
    let config = s.train()?;
    let spec = config.burst_spec();
    let pool = match s.path("images") {
        Some(dir) => SourcePool::Images(load_sources(&dir, spec.min_source())?),
        None => {
            let size: usize = s.parse("corpus_size")?;
            if size < spec.min_source() {
                return Err(Failure::Usage(format!(
                    "corpus_size {size} is below the {} needed for {}px patches",
                    spec.min_source(),
                    spec.patch
                )));
            }
            SourcePool::Images(procedural_corpus(s.parse("corpus_count")?, size, config.seed))
        }
    };
    let stream = SyntheticStream::new(pool, spec, config.seed);
    let mut trainer: Trainer<T, _> = match resume {
        Some(path) => Trainer::resume(config.clone(), stream, Checkpoint::load(path)?)?,
        None => Trainer::new(config.clone(), stream)?,
    };
    echo_config(s, out)?;

    let log_path = out.join("loss.csv");
    let append = resume.is_some() && log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&log_path)?;
    if !append {
        writeln!(log, "{LOSS_CSV_HEADER}")?;
    }

    let checkpoint_every: u64 = s.parse("checkpoint_every")?;
    let eval_every: u64 = s.parse("eval_every")?;
    let log_every: u64 = s.parse::<u64>("log_every")?.max(1);
    let mode: Mode = s.get("mode").parse()?;
    let mut recent: Vec<LossRecord> = Vec::new();
    eprintln!(
        "training {} parameters from step {} to {}",
        trainer.checkpoint().parameter_count(),
        trainer.checkpoint().step,
        config.steps
    );
    let result = trainer.run(|ckpt, rec| {
        writeln!(log, "{}", loss_csv_line(rec))?;
        if rec.skipped {
            eprintln!("step {}: non-finite gradient, update skipped", rec.step);
        }
        recent.push(*rec);
        if recent.len() > 20 {
            recent.remove(0);
        }
        let step = ckpt.step;
        if step % log_every == 0 {
            let smooth = smoothed_losses(&recent, 20).last().copied().unwrap_or(f64::NAN);
            eprintln!(
                "step {step}: total {:.5} (smoothed {smooth:.5}) basic {:.5} anneal {:.3}",
                rec.total_loss, rec.basic_loss, rec.anneal_weight
            );
        }
        if checkpoint_every > 0 && step % checkpoint_every == 0 {
            log.flush()?;
            ckpt.save(&out.join(format!("ckpt_{step:08}.mkpn")))?;
        }
        if let (Some(ts), true) = (testset, eval_every > 0 && step % eval_every == 0) {
            let report = evaluate(ckpt, ts, mode)?;
            let mut line = format!("step {step}:");
            for g in report.summaries() {
                line.push_str(&format!(
                    " gain{} psnr {:.2} ssim {:.4} (noisy {:.2})",
                    g.gain.level(),
                    g.psnr,
                    g.ssim,
                    g.noisy_psnr
                ));
            }
            eprintln!("{line}");
            let mut f = OpenOptions::new().create(true).append(true).open(out.join("eval_log.txt"))?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    });
    log.flush()?;
    if let Err(e) = result {
        let msg = e.to_string();
        let _ = fs::write(out.join("failure.txt"), format!("{msg}\n"));
        return Err(Failure::Runtime(msg));
    }
    let ckpt = trainer.checkpoint();
    ckpt.save(&out.join("model.mkpn"))?;
    println!("saved {} after {} steps", out.join("model.mkpn").display(), ckpt.step);
    Ok(())
}

fn panels(
    ckpt: &Checkpoint<impl Real>,
    sample: &BurstSample,
    mode: Mode,
    out: &Path,
    stem: &str,
) -> Result<(f64, f64), Failure> {
    let result = run_denoise(ckpt, sample, mode)?;
    let reference = sample.reference_frame()?;
    save_png(&reference, &out.join(format!("{stem}_noisy.png")))?;
    save_png(&result.output, &out.join(format!("{stem}_output.png")))?;
    save_png(&sample.ground_truth, &out.join(format!("{stem}_truth.png")))?;
    let panel = side_by_side(&[&reference, &result.output, &sample.ground_truth], 4)?;
    save_png(&panel, &out.join(format!("{stem}_panel.png")))?;
    let border = ckpt.config.max_kernel_size() / 2;
    let (p, _) = score(&result.output, &sample.ground_truth, border)?;
    let (np, _) = score(&reference, &sample.ground_truth, border)?;
    Ok((np, p))
}

pub fn denoise(s: &Settings, ckpt: &Path, input: &Path, out: &Path, count: Option<usize>) -> Result<(), Failure> {
    let mode: Mode = s.get("mode").parse()?;
    let any = load_checkpoint(ckpt)?;
    echo_config(s, out)?;
    let mut jobs: Vec<(String, BurstSample)> = Vec::new();
    if input.is_file() {
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("burst").to_string();
        jobs.push((stem, BurstSample::from_container(&Container::load(input)?)?));
    } else {
        let limit = count.unwrap_or(usize::MAX);
        for dir in discover_testsets(input)? {
            let manifest = read_manifest(&dir)?;
            for e in manifest.entries.iter().take(limit) {
                let stem = format!("gain{}_{:04}", manifest.gain.level(), e.id);
                jobs.push((stem, load_sample(&dir, e)?));
            }
        }
    }
    for (stem, sample) in &jobs {
        let (np, p) = with_checkpoint!(&any, ck => panels(ck, sample, mode, out, stem))?;
        println!("{stem}: noisy {np:.2} dB -> output {p:.2} dB");
    }
    println!("wrote {} panels to {}", jobs.len(), out.display());
    Ok(())
}

pub fn eval(s: &Settings, ckpt: &Path, testset: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let mode: Mode = s.get("mode").parse()?;
    let any = load_checkpoint(ckpt)?;
    let report = with_checkpoint!(&any, ck => evaluate(ck, testset, mode))?;
    print!("{}", report.table());
    if let Some(dir) = out {
        echo_config(s, dir)?;
        fs::write(dir.join("eval.csv"), report.to_csv())?;
        fs::write(dir.join("eval_summary.txt"), report.table())?;
    }
    Ok(())
}

pub fn bench(s: &Settings, out: Option<&Path>) -> Result<(), Failure> {
    let extent: usize = s.parse("extent")?;
    let burst: usize = s.parse("burst_len")?;
    let reps: usize = s.parse("reps")?;
    let seed: u64 = s.parse("seed")?;
    let mut csv = format!("{}\n", ReconBench::header());
    println!(
        "{:<18} {:>11} {:>11} {:>10} {:>10} {:>8}",
        "sizes", "naive_convs", "fused_convs", "naive_ms", "fused_ms", "speedup"
    );
    for set in s.kernel_sets()? {
        let b = bench_reconstruction(extent, burst, &set, reps, seed)?;
        let sizes: Vec<String> = set.iter().map(|v| v.to_string()).collect();
        let (n, f) = (b.naive_time.as_secs_f64(), b.fused_time.as_secs_f64());
        println!(
            "{:<18} {:>11} {:>11} {:>10.2} {:>10.2} {:>7.2}x",
            format!("{{{}}}", sizes.join(",")),
            b.naive_convs,
            b.fused_convs,
            n * 1e3,
            f * 1e3,
            n / f
        );
        csv.push_str(&b.csv_line());
        csv.push('\n');
    }
    if let Some(dir) = out {
        echo_config(s, dir)?;
        fs::write(dir.join("bench.csv"), csv)?;
    }
    Ok(())
}
