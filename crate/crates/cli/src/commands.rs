use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use amde::metrics::{fmt_g6, Summary};
use amde::projector::{pyramid_sizes, ProjectorParams};
use amde::runtime::{
    adoption_stats, check_results, lag_profile, run_async, run_log, run_sync, FrameResult, Mode, Pipeline,
    PipelineConfig, RunConfig,
};
use amde::synthworld::{generate_sequence, load_sequence, Decoder, FrameBundle, SceneConfig, World, DEFAULT_READOUT};
use anyhow::{Context, Result};

use crate::bench::bench_cache;
use crate::config::{ConfigError, Settings};

/// Files written under the output directory, in order.
pub struct Written {
    dir: PathBuf,
    files: Vec<String>,
}

impl Written {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(path.display().to_string());
        Ok(())
    }

    fn report(&self, out: &mut String) {
        for f in &self.files {
            let _ = writeln!(out, "wrote {f}");
        }
    }
}

/// Pipeline and frames, either generated from the scene or read from `run.input`.
pub fn prepare(settings: &Settings) -> Result<(Pipeline, Vec<FrameBundle>)> {
    match &settings.input {
        Some(dir) => {
            let (m, e, mut frames) = load_sequence(dir).with_context(|| format!("loading {}", dir.display()))?;
            if m.first_frame != 0 {
                return Err(ConfigError(format!("{} starts at frame {}, expected 0", dir.display(), m.first_frame)).into());
            }
            frames.truncate(settings.frames);
            let projector = ProjectorParams::identity(m.channels, pyramid_sizes(m.height, m.width)?);
            let decoder = Decoder::new(&e, DEFAULT_READOUT, m.height, m.width)?;
            Ok((Pipeline::new(settings.pipeline.clone(), projector, decoder)?, frames))
        }
        None => scene_run(&settings.scene, &settings.pipeline, settings.frames),
    }
}

fn scene_run(scene: &SceneConfig, cfg: &PipelineConfig, frames: usize) -> Result<(Pipeline, Vec<FrameBundle>)> {
    let world = World::new(scene.clone())?;
    let pipeline = Pipeline::for_world(&world, cfg.clone())?;
    Ok((pipeline, generate_sequence(scene, frames)?))
}

pub fn generate(settings: &Settings, out: &Path) -> Result<String> {
    let frames = generate_sequence(&settings.scene, settings.frames)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    amde::synthworld::export_sequence(out, &settings.scene, &frames).with_context(|| format!("writing {}", out.display()))?;
    let s = &settings.scene;
    Ok(format!(
        "generated {} frames of {}x{} (seed {}, {} channels) into {}\n",
        frames.len(),
        s.height,
        s.width,
        s.seed,
        s.channels,
        out.display()
    ))
}

fn cycle_line(summary: Option<&Summary>) -> String {
    match summary {
        Some(s) => format!(
            "cycle_avg absrel {} rmse {} delta1 {} mean_t {} fastpath_pct {}\n",
            fmt_g6(s.cycle.absrel),
            fmt_g6(s.cycle.rmse),
            fmt_g6(s.cycle.delta1),
            fmt_g6(s.cycle.mean_t),
            fmt_g6(s.cycle.fastpath_pct)
        ),
        None => "no frames fell inside the lag bins\n".into(),
    }
}

fn write_run(out_dir: &Path, results: &[FrameResult], frames: &Vec<FrameBundle>, bins: usize, text: &mut String) -> Result<Written> {
    let profile = lag_profile(results, frames, bins)?;
    let summary = profile.cycle_average();
    text.push_str(&cycle_line(summary.as_ref()));
    let mut w = Written::create(out_dir)?;
    w.write("run_log.csv", &run_log(results, Some(frames))?)?;
    if let Some(s) = &summary {
        w.write("lag_profile.csv", &s.to_csv())?;
    }
    Ok(w)
}

pub fn run_sync_cmd(settings: &Settings, out: &Path) -> Result<String> {
    let (pipeline, frames) = prepare(settings)?;
    let results = run_sync(&pipeline, &frames, settings.run.n)?;
    check_results(&results)?;
    let refreshes = results.iter().filter(|r| r.refreshed_from.is_some()).count();
    let mut text = format!("run-sync: {} frames, N = {}, {refreshes} refreshes\n", results.len(), settings.run.n);
    let w = write_run(out, &results, &frames, settings.run.n, &mut text)?;
    w.report(&mut text);
    Ok(text)
}

pub fn run_async_cmd(settings: &Settings, out: &Path) -> Result<String> {
    let (pipeline, frames) = prepare(settings)?;
    let cfg = RunConfig { mode: Mode::Async, ..settings.run.clone() };
    let report = run_async(&pipeline, &frames, &cfg)?;
    check_results(&report.results)?;
    let mut text = format!(
        "run-async: {} frames, {:?} clock, L_slow {} ms, L_fast {} ms, {} publishes, {} empty reads\n",
        report.results.len(),
        cfg.clock,
        cfg.l_slow_ms,
        cfg.l_fast_ms,
        report.publishes.len(),
        report.empty_reads
    );
    match adoption_stats(&report.results) {
        Some(a) => {
            let _ = writeln!(
                text,
                "adoptions {} mean_lag {} mean_interval {}",
                a.count,
                fmt_g6(a.mean_lag),
                fmt_g6(a.mean_interval)
            );
        }
        None => text.push_str("no refresh adopted after the initial one\n"),
    }
    let mut w = write_run(out, &report.results, &frames, settings.run.n, &mut text)?;
    let mut pubs = String::from("version,source_frame,time_us\n");
    for p in &report.publishes {
        let _ = writeln!(pubs, "{},{},{}", p.version, p.source_frame, p.time_us);
    }
    w.write("publishes.csv", &pubs)?;
    w.report(&mut text);
    Ok(text)
}

fn seed_summary(settings: &Settings, seed: u64) -> Result<(Summary, Summary)> {
    let scene = SceneConfig { seed, ..settings.scene.clone() };
    let (pipeline, frames) = scene_run(&scene, &settings.pipeline, settings.frames)?;
    let n = settings.run.n;
    let results = match settings.run.mode {
        Mode::SyncReplay => run_sync(&pipeline, &frames, n)?,
        Mode::Async => run_async(&pipeline, &frames, &settings.run)?.results,
    };
    check_results(&results)?;
    let encoder = run_sync(&pipeline.with_override(Some(0.0))?, &frames, n)?;
    let empty = || anyhow::Error::new(ConfigError(format!("seed {seed}: no frame fell inside the {n} lag bins")));
    let mem = lag_profile(&results, &frames, n)?.cycle_average().ok_or_else(empty)?;
    let enc = lag_profile(&encoder, &frames, n)?.cycle_average().ok_or_else(empty)?;
    Ok((mem, enc))
}

pub fn sweep_lag(settings: &Settings, out: &Path) -> Result<String> {
    if settings.input.is_some() {
        return Err(ConfigError("sweep-lag generates one world per seed; unset run.input".into()).into());
    }
    let first = settings.scene.seed;
    let mut per_seed = Vec::with_capacity(settings.seeds);
    for seed in first..first + settings.seeds as u64 {
        per_seed.push((seed, seed_summary(settings, seed)?));
    }
    let mem: Vec<Summary> = per_seed.iter().map(|(_, (m, _))| m.clone()).collect();
    let enc: Vec<Summary> = per_seed.iter().map(|(_, (_, e))| e.clone()).collect();
    let mean = Summary::mean_of(&mem).ok_or_else(|| ConfigError("seeds disagree on which lags were observed".into()))?;
    let enc_mean = Summary::mean_of(&enc).expect("at least one seed");
    let bound = enc_mean.cycle.absrel;

    let mut w = Written::create(out)?;
    for (seed, (m, _)) in &per_seed {
        w.write(&format!("lag_seed_{seed:04}.csv"), &m.to_csv())?;
    }
    w.write("lag_mean.csv", &mean.to_csv())?;
    w.write("encoder_only.csv", &enc_mean.to_csv())?;

    let mut text = format!(
        "sweep-lag: {} seeds from {first}, N = {}, {} frames per seed, encoder-only absrel {}\nlag,absrel,ratio_to_encoder_only\n",
        settings.seeds,
        settings.run.n,
        settings.frames,
        fmt_g6(bound)
    );
    for r in &mean.rows {
        let _ = writeln!(text, "{},{},{}", r.lag.expect("lag row"), fmt_g6(r.absrel), fmt_g6(r.absrel / bound));
    }
    let violations = mean.rows.windows(2).filter(|p| p[1].absrel < p[0].absrel).count();
    let _ = writeln!(text, "adjacent-lag rank violations {violations}");
    w.report(&mut text);
    Ok(text)
}

pub fn bench(settings: &Settings, out: Option<&Path>) -> Result<(String, bool)> {
    let report = bench_cache(&settings.bench);
    let text = report.render();
    let mut shown = text.clone();
    if let Some(dir) = out {
        let mut w = Written::create(dir)?;
        w.write("bench_cache.txt", &text)?;
        w.report(&mut shown);
    }
    Ok((shown, report.torn_reads == 0))
}
