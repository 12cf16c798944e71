use std::fs;
use std::path::{Path, PathBuf};

use lgmsep_core::container::Container;
use lgmsep_core::evalkit::{evaluate_item, MetricReport};
use lgmsep_core::ilrma_solver::{fit_ilrma, source_images, IlrmaConfig};
use lgmsep_core::mixsim::{build_scenario, synth_class_sources, synthetic_meta, MixSpec, ScenarioManifest, SourceRecipe, SpectralClass};
use lgmsep_core::mnmf_solver::{
    fit_gmvae, fit_mnmf, reconstruct_sources, GmvaeConfig, MixtureObservation, MnmfConfig, NmfKind, SolverTrace, WarmStart,
};
use lgmsep_core::neural::{CvaeShape, CvaeWeights, TrainConfig, TrainExample, Trainer};
use lgmsep_core::signal_io::{istft, read_wav, stft, write_wav, SampleFormat, Waveform};
use lgmsep_core::Error;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{self, EvalRun, Method, MixRun, SeparateRun, SourceConfig, StftConfig, TrainRun};
use crate::{CliError, Common};

type Res<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Res<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Res<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn sorted_entries(dir: &Path) -> Res<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| io_err(dir, err)))
        .collect::<Res<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn is_wav(p: &Path) -> bool {
    p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

// ---------------------------------------------------------------- train

pub fn train(flags: &Common) -> Res<()> {
    let mut cfg: TrainRun = config::load(&flags.config)?;
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(n) = flags.iters {
        cfg.optimizer.epochs = n;
    }
    if let Some(o) = &flags.out {
        cfg.out = o.clone();
    }
    if flags.method.is_some() {
        return Err(CliError::Config("--method does not apply to train".into()));
    }
    cfg.validate()?;
    let (classes, data) = load_corpus(&cfg)?;
    let bins = cfg.stft.bins(cfg.sample_rate)?;
    let shape = CvaeShape {
        spec_dim: bins,
        latent_dim: cfg.latent_dim,
        num_classes: classes.len(),
        hidden: cfg.hidden,
        hidden_layers: cfg.hidden_layers,
    };
    let o = cfg.optimizer;
    let tc = TrainConfig {
        epochs: o.epochs,
        batch_size: o.batch_size,
        learning_rate: o.learning_rate,
        beta1: o.beta1,
        beta2: o.beta2,
        epsilon: o.epsilon,
        seed: cfg.seed,
    };
    write_json(&cfg.out.join("config.json"), &cfg)?;
    let state_path = cfg.out.join("train_state.bin");
    let mut trainer = if cfg.resume && state_path.exists() {
        let mut t = Trainer::from_container(&Container::read(&state_path)?)?;
        let stored = TrainConfig { epochs: tc.epochs, ..t.config };
        if t.weights.shape() != shape || stored != tc {
            return Err(CliError::Config(format!(
                "{} was written with different settings; remove it or set \"resume\": false",
                state_path.display()
            )));
        }
        t.config.epochs = tc.epochs;
        log::info!("resuming training at epoch {}", t.epoch);
        t
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Trainer::new(CvaeWeights::random(shape, &mut rng), tc)
    };
    while trainer.epoch < tc.epochs {
        match trainer.run_epoch(&data) {
            Ok(log) => {
                log::info!("epoch {} elbo/bin {:.5}", log.epoch, log.elbo);
                if trainer.epoch % cfg.checkpoint_every == 0 {
                    trainer.to_container().write(&state_path)?;
                }
            }
            Err(e) => {
                // the trainer still holds the last good epoch
                trainer.to_container().write(&state_path)?;
                write_train_log(&cfg.out, &trainer)?;
                return Err(e.into());
            }
        }
    }
    trainer.to_container().write(&state_path)?;
    trainer.weights.save(cfg.out.join("weights.bin"))?;
    write_train_log(&cfg.out, &trainer)?;
    let (frame_len, hop) = cfg.stft.resolve(cfg.sample_rate)?;
    write_json(
        &cfg.out.join("classes.json"),
        &json!({
            "classes": classes,
            "sample_rate": cfg.sample_rate,
            "frame_len": frame_len,
            "hop": hop,
            "window": cfg.stft.window,
            "examples": data.len(),
            "seed": cfg.seed,
        }),
    )?;
    if let Some(last) = trainer.log.last() {
        println!(
            "trained {} epochs on {} examples of {} classes; final ELBO per bin {:.5}",
            trainer.epoch,
            data.len(),
            classes.len(),
            last.elbo
        );
    }
    Ok(())
}

fn write_train_log(out: &Path, t: &Trainer) -> Res<()> {
    let mut text = String::from("epoch\telbo\trecon\tkl\n");
    for l in &t.log {
        text += &format!("{}\t{:.8}\t{:.8}\t{:.8}\n", l.epoch, l.elbo, l.recon, l.kl);
    }
    write_text(&out.join("train_log.tsv"), &text)
}

/// Reads `data_dir/<class>/*.wav` into unit-mean power segments.
fn load_corpus(cfg: &TrainRun) -> Res<(Vec<String>, Vec<TrainExample>)> {
    let (frame_len, hop) = cfg.stft.resolve(cfg.sample_rate)?;
    let mut classes = Vec::new();
    let mut data = Vec::new();
    for entry in sorted_entries(&cfg.data_dir)? {
        if is_wav(&entry) {
            return Err(CliError::Config(format!(
                "{} has no class label; put each WAV in a per-class subdirectory of data_dir",
                entry.display()
            )));
        }
        if !entry.is_dir() {
            continue;
        }
        let class = classes.len();
        let wavs: Vec<PathBuf> = sorted_entries(&entry)?.into_iter().filter(|p| is_wav(p)).collect();
        if wavs.is_empty() {
            return Err(CliError::Config(format!("class directory {} holds no WAV files", entry.display())));
        }
        classes.push(file_name(&entry));
        for path in wavs {
            let w = read_wav(&path)?;
            if w.sample_rate != cfg.sample_rate {
                return Err(CliError::Config(format!(
                    "{} is sampled at {} Hz, expected {}",
                    path.display(),
                    w.sample_rate,
                    cfg.sample_rate
                )));
            }
            let mono = Waveform::mono(w.channels[0].clone(), w.sample_rate);
            let s = stft(&mono, frame_len, hop, cfg.stft.window)?;
            let power = s.power(0);
            let seg = cfg.segment_frames.min(s.frames);
            for start in (0..=s.frames - seg).step_by(seg) {
                let block: Vec<f64> = (0..s.bins)
                    .flat_map(|f| power[f * s.frames + start..f * s.frames + start + seg].iter().copied())
                    .collect();
                if block.iter().all(|&p| p == 0.0) {
                    continue;
                }
                data.push(TrainExample::from_bin_major(&block, s.bins, seg, class)?);
            }
        }
    }
    if classes.is_empty() {
        return Err(CliError::Config(format!(
            "{} has no class subdirectories",
            cfg.data_dir.display()
        )));
    }
    if data.is_empty() {
        return Err(CliError::Config("the training corpus is silent".into()));
    }
    Ok((classes, data))
}

// ---------------------------------------------------------------- mix

pub fn mix(flags: &Common) -> Res<()> {
    let mut cfg: MixRun = config::load(&flags.config)?;
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(o) = &flags.out {
        cfg.out = o.clone();
    }
    if flags.method.is_some() || flags.iters.is_some() {
        return Err(CliError::Config("--method and --iters do not apply to mix".into()));
    }
    cfg.validate()?;
    write_json(&cfg.out.join("config.json"), &cfg)?;
    let recipe = match &cfg.source {
        SourceConfig::Nmf { bases } => SourceRecipe::Nmf { bases: *bases },
        SourceConfig::Classes { classes } => SourceRecipe::Classes(classes.clone()),
    };
    for k in 0..cfg.count {
        let mut spec = MixSpec::new(cfg.sources, cfg.channels, cfg.mixing, cfg.seed.wrapping_add(k as u64));
        spec.gains = cfg.gains.clone();
        spec.max_delay_ms = cfg.max_delay_ms;
        let sc = build_scenario(&spec, &recipe, cfg.bins, cfg.frames, cfg.sample_rate)?;
        sc.write(&cfg.out.join(format!("item_{k:03}")))?;
    }
    if let Some(corpus) = &cfg.corpus {
        let meta = synthetic_meta(cfg.bins, corpus.frames, cfg.sample_rate);
        for &c in &corpus.classes {
            let class = SpectralClass::preset(c)?;
            let dir = cfg.out.join("corpus").join(format!("class_{c}"));
            for e in 0..corpus.examples_per_class {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(((c as u64) << 32) | e as u64);
                let mut s = synth_class_sources(&[class.clone()], cfg.bins, corpus.frames, rng.next_u64())?;
                let mut spec = s.spectrograms.remove(0);
                spec.meta = Some(meta);
                let w = istft(&spec)?;
                fs::create_dir_all(&dir).map_err(|err| io_err(&dir, err))?;
                write_wav(dir.join(format!("example_{e:03}.wav")), &w, SampleFormat::Float32)?;
            }
        }
    }
    println!("wrote {} mixture(s) to {}", cfg.count, cfg.out.display());
    Ok(())
}

// ---------------------------------------------------------------- separate

/// Mixture directories under `root`: `root` itself when it holds
/// `marker`, else its subdirectories that do. Names are relative.
fn find_items(root: &Path, marker: &str) -> Res<Vec<(String, PathBuf)>> {
    if root.join(marker).is_file() {
        return Ok(vec![(String::new(), root.to_path_buf())]);
    }
    if !root.is_dir() {
        return Err(io_err(root, std::io::Error::new(std::io::ErrorKind::NotFound, "no such directory")));
    }
    let items: Vec<(String, PathBuf)> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.join(marker).is_file())
        .map(|p| (file_name(&p), p))
        .collect();
    if items.is_empty() {
        return Err(CliError::Config(format!("no {marker} found in {} or its subdirectories", root.display())));
    }
    Ok(items)
}

fn read_manifest(dir: &Path) -> Res<Option<ScenarioManifest>> {
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_trace(path: &Path, trace: &SolverTrace) -> Res<()> {
    let mut text = String::from("iteration\tblock\tnll\tmajorizer\n");
    text += &format!("0\tinitial\t{:.12e}\t-\n", trace.initial_nll);
    for b in &trace.blocks {
        let m = b.majorizer.map_or("-".to_string(), |m| format!("{m:.12e}"));
        text += &format!("{}\t{}\t{:.12e}\t{}\n", b.iteration, format!("{:?}", b.block).to_lowercase(), b.nll, m);
    }
    write_text(path, &text)
}

pub fn separate(flags: &Common) -> Res<()> {
    let mut cfg: SeparateRun = config::load(&flags.config)?;
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(m) = &flags.method {
        cfg.method = Method::parse(m)?;
    }
    if let Some(n) = flags.iters {
        cfg.iterations = Some(n);
    }
    if let Some(o) = &flags.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    let items = find_items(&cfg.input, "mixture.wav")?;
    let weights = match &cfg.weights {
        Some(p) => Some(CvaeWeights::load(p)?),
        None => None,
    };
    write_json(&cfg.out.join("config.json"), &cfg)?;
    for (name, dir) in &items {
        let out = if name.is_empty() { cfg.out.clone() } else { cfg.out.join(name) };
        separate_item(&cfg, weights.as_ref(), name, dir, &out)?;
    }
    println!("separated {} mixture(s) with {} into {}", items.len(), cfg.method.name(), cfg.out.display());
    Ok(())
}

fn separate_item(cfg: &SeparateRun, weights: Option<&CvaeWeights>, name: &str, dir: &Path, out: &Path) -> Res<()> {
    let mixture = read_wav(dir.join("mixture.wav"))?;
    let stft_cfg = match (&cfg.stft, read_manifest(dir)?) {
        (Some(s), _) => *s,
        (None, Some(m)) => StftConfig::from_meta(&m.stft),
        (None, None) => StftConfig::default(),
    };
    let (frame_len, hop) = stft_cfg.resolve(mixture.sample_rate)?;
    let spec = stft(&mixture, frame_len, hop, stft_cfg.window)?;
    let obs = MixtureObservation::from_spectrogram(&spec)?;
    let iterations = cfg.iterations();
    let mut extra = json!({});
    let (images, checkpoint, trace) = match cfg.method {
        Method::Mnmf1 | Method::Mnmf2 => {
            let kind = if cfg.method == Method::Mnmf1 { NmfKind::Nmf1 } else { NmfKind::Nmf2 };
            let fit = with_trace(out, fit_mnmf(
                &obs,
                &MnmfConfig {
                    kind,
                    sources: cfg.sources,
                    bases: cfg.bases,
                    iterations,
                    seed: cfg.seed,
                },
            ))?;
            let images = reconstruct_sources(&obs, &fit.spatial, &fit.variance_field())?;
            (images, fit.to_container(), fit.trace)
        }
        Method::Ilrma => {
            if cfg.sources != obs.channels {
                return Err(CliError::Config(format!(
                    "ilrma needs as many sources as microphones, got {} sources for {} channels; \
                     use mnmf1, mnmf2 or gmvae for underdetermined mixtures",
                    cfg.sources, obs.channels
                )));
            }
            let fit = with_trace(out, fit_ilrma(
                &obs,
                &IlrmaConfig {
                    kind: cfg.ilrma_model,
                    bases: cfg.bases,
                    iterations,
                    seed: cfg.seed,
                },
            ))?;
            let images = source_images(&obs, &fit.demixing)?;
            extra = json!({ "loaded_updates": fit.loaded_updates, "skipped_updates": fit.skipped_updates });
            (images, fit.to_container(), fit.trace)
        }
        Method::Gmvae => {
            let w = weights.expect("validated");
            if w.spec_dim != obs.bins {
                return Err(CliError::Config(format!(
                    "the weights model {} frequency bins but the mixture STFT has {}; use the training STFT",
                    w.spec_dim, obs.bins
                )));
            }
            let warm = match &cfg.warm_start {
                Some(root) => {
                    let path = if name.is_empty() { root.join("checkpoint.bin") } else { root.join(name).join("checkpoint.bin") };
                    let ws = WarmStart::from_container(&Container::read(&path)?)?;
                    if ws.spatial.sources != cfg.sources {
                        return Err(CliError::Config(format!(
                            "{} holds {} sources, expected {}",
                            path.display(),
                            ws.spatial.sources,
                            cfg.sources
                        )));
                    }
                    Some(ws)
                }
                None => None,
            };
            let fit = with_trace(out, fit_gmvae(
                &obs,
                w,
                &GmvaeConfig {
                    iterations,
                    warm_start_iterations: cfg.warm_start_iterations,
                    sources: cfg.sources,
                    bases: cfg.bases,
                    latent: cfg.latent,
                    fix_spatial_trace: cfg.fix_spatial_trace,
                    seed: cfg.seed,
                },
                warm,
            ))?;
            let images = reconstruct_sources(&obs, &fit.spatial, &fit.variance_field(w)?)?;
            extra = json!({ "class_probs": fit.class_probs() });
            (images, fit.to_container(w)?, fit.trace)
        }
    };
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for (j, mut img) in images.into_iter().enumerate() {
        img.meta = spec.meta;
        write_wav(out.join(format!("estimate_{j}.wav")), &istft(&img)?, SampleFormat::Float32)?;
    }
    checkpoint.write(out.join("checkpoint.bin"))?;
    write_trace(&out.join("trace.tsv"), &trace)?;
    let mut summary = json!({
        "method": cfg.method.name(),
        "seed": cfg.seed,
        "sources": images_count(cfg, &obs),
        "channels": obs.channels,
        "bins": obs.bins,
        "frames": obs.frames,
        "iterations": iterations,
        "initial_nll": trace.initial_nll,
        "final_nll": trace.final_nll(),
        "max_relative_increase": trace.max_relative_increase(),
        "skipped_bins": trace.skipped_bins,
    });
    summary.as_object_mut().expect("object").extend(extra.as_object().expect("object").clone());
    write_json(&out.join("separation.json"), &summary)
}

/// Keeps the NLL trace of an aborted solver next to the outputs.
fn with_trace<T>(out: &Path, r: Result<T, Error>) -> Res<T> {
    if let Err(Error::SolverAborted { nll_trace, .. }) = &r {
        let text: String = nll_trace.iter().map(|x| format!("{x:.12e}\n")).collect();
        write_text(&out.join("trace_aborted.tsv"), &text)?;
    }
    Ok(r?)
}

fn images_count(cfg: &SeparateRun, obs: &MixtureObservation) -> usize {
    if cfg.method == Method::Ilrma {
        obs.channels
    } else {
        cfg.sources
    }
}

// ---------------------------------------------------------------- eval

fn fit_length(w: Waveform, len: usize) -> Waveform {
    let channels = w
        .channels
        .into_iter()
        .map(|mut c| {
            c.resize(len, 0.0);
            c
        })
        .collect();
    Waveform {
        channels,
        sample_rate: w.sample_rate,
    }
}

pub fn eval(flags: &Common) -> Res<()> {
    let mut cfg: EvalRun = config::load(&flags.config)?;
    if let Some(m) = &flags.method {
        cfg.method = Some(m.clone());
    }
    if let Some(o) = &flags.out {
        cfg.out = o.clone();
    }
    if flags.seed.is_some() || flags.iters.is_some() {
        return Err(CliError::Config("--seed and --iters do not apply to eval".into()));
    }
    cfg.validate()?;
    let items = find_items(&cfg.references, "manifest.json")?;
    let est_dirs: Vec<PathBuf> = items
        .iter()
        .map(|(name, _)| if name.is_empty() { cfg.estimates.clone() } else { cfg.estimates.join(name) })
        .collect();
    let label = match &cfg.method {
        Some(m) => m.clone(),
        None => {
            let path = est_dirs[0].join("separation.json");
            fs::read_to_string(&path)
                .ok()
                .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
                .and_then(|v| v["method"].as_str().map(str::to_string))
                .unwrap_or_else(|| "unknown".into())
        }
    };
    let results = items
        .par_iter()
        .zip(&est_dirs)
        .map(|((name, dir), est_dir)| -> Res<_> {
            let manifest = read_manifest(dir)?.expect("found by marker");
            let refs = manifest
                .reference_files
                .iter()
                .map(|f| read_wav(dir.join(f)))
                .collect::<Result<Vec<_>, _>>()?;
            let len = refs[0].len();
            let mixture = fit_length(read_wav(dir.join(&manifest.mixture_file))?, len);
            let est = (0..refs.len())
                .map(|j| read_wav(est_dir.join(format!("estimate_{j}.wav"))).map(|w| fit_length(w, len)))
                .collect::<Result<Vec<_>, _>>()?;
            let pattern = match &manifest.classes {
                Some(c) => c.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-"),
                None => "nmf".into(),
            };
            let item_name = if name.is_empty() { "mixture".to_string() } else { name.clone() };
            Ok(evaluate_item(&item_name, &pattern, &est, &refs, Some(&mixture), cfg.reference_channel)?)
        })
        .collect::<Res<Vec<_>>>()?;
    let report = MetricReport::new(&label, results);
    report.write(&cfg.out)?;
    let o = &report.overall;
    println!(
        "{}: {} mixture(s), SDR {:.2} dB, SIR {:.2} dB, SAR {:.2} dB, SI-SDR {:.2} dB",
        label, o.items, o.sdr, o.sir, o.sar, o.si_sdr
    );
    Ok(())
}

