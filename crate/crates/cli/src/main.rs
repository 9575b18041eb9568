use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;

use phonorec::audio::{self, AudioBuffer, DEFAULT_MIN_PAD_SECONDS};
use phonorec::baseline::{self, BaselineModel};
use phonorec::ctc::greedy_decode;
use phonorec::data::{self, Manifest, ManifestRow};
use phonorec::metrics::{self, Granularity};
use phonorec::model::Model;
use phonorec::phonemize::{self, Lexicon, PhonemeInventory};
use phonorec::roomsim::{self, RoomScene};
use phonorec::textnorm::{self, Transcript};
use phonorec::Language;

mod config;

use config::TrainConfig;

#[derive(Parser)]
#[command(
    name = "phonorec",
    version,
    about = "Phoneme recognition pipeline for noisy classroom audio"
)]
struct Cli {
    /// Seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute log-mel feature files for every manifest row.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_PAD_SECONDS)]
        min_pad_seconds: f64,
    },
    /// Normalize raw transcripts, one per line.
    Normalize {
        #[arg(long)]
        lang: Language,
        /// Read from this file instead of stdin.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Turn normalized sentences into phoneme transcripts.
    Phonemize(PhonemizeArgs),
    /// Re-record a corpus in simulated rooms, one output per scene.
    Simulate(SimulateArgs),
    /// Train the recognizer from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy-decode every manifest row with a checkpoint.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Inventory tag or label file; defaults to `inventory.txt` beside the checkpoint.
        #[arg(long)]
        inventory: Option<String>,
        #[arg(long, default_value_t = DEFAULT_MIN_PAD_SECONDS)]
        min_pad_seconds: f64,
    },
    /// Score hypotheses against references.
    Eval {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long, default_value_t = Granularity::Phoneme)]
        granularity: Granularity,
    },
    /// MFCC + PCA + linear SVM utterance classifier.
    #[command(subcommand)]
    Baseline(BaselineCommand),
    /// Write a synthetic tone corpus whose phonemes are known exactly.
    Synthgen {
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Space-separated phoneme labels.
        #[arg(long, default_value = "b d k s t m n f")]
        vocab: String,
        /// Inventory the vocabulary must belong to.
        #[arg(long, default_value = "en_sc")]
        inventory: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PhonemizeArgs {
    #[arg(long, required_unless_present = "dump_inventory")]
    lang: Option<Language>,
    /// `word<TAB>phonemes` file; the built-in seed lexicon otherwise.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Check every phoneme against this inventory (tag or label file).
    #[arg(long)]
    inventory: Option<String>,
    /// Print the inventory as `id<TAB>label` and exit.
    #[arg(long, requires = "inventory")]
    dump_inventory: bool,
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Scene JSON file; repeat for several. The four built-in layouts otherwise.
    #[arg(long = "scene")]
    scenes: Vec<PathBuf>,
    /// Manifest of competing-speech recordings; the input corpus otherwise.
    #[arg(long)]
    babble_pool: Option<PathBuf>,
    /// Manifest of noise recordings; the input corpus otherwise.
    #[arg(long)]
    noise_pool: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BaselineCommand {
    /// Fit on a manifest whose transcripts are class labels.
    Fit {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// PCA dimension; grid-searched with `c` when omitted.
        #[arg(long, requires = "c")]
        k: Option<usize>,
        #[arg(long, requires = "k")]
        c: Option<f64>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
    /// Print `audio<TAB>label` for every row and the accuracy against its transcript.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Nested cross-validation with inner grid search.
    Cv {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        outer: usize,
        #[arg(long, default_value_t = 3)]
        inner: usize,
    },
}

/// A failure attributed to input data, reported with exit status 2.
#[derive(Debug)]
struct DataError(String);

impl<E: std::error::Error + 'static> From<E> for DataError {
    fn from(e: E) -> Self {
        let closed = (&e as &dyn std::any::Any)
            .downcast_ref::<io::Error>()
            .is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe);
        DataError(if closed {
            BROKEN_PIPE.into()
        } else {
            e.to_string()
        })
    }
}

const BROKEN_PIPE: &str = "stdout closed";

type Result<T> = std::result::Result<T, DataError>;

fn fail(msg: impl Into<String>) -> DataError {
    DataError(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Ok(n) = std::env::var("PHONOREC_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("error: PHONOREC_THREADS must be a positive integer, got `{n}`");
                return ExitCode::from(1);
            }
        }
    }
    match run(cli.command, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(DataError(msg)) if msg == BROKEN_PIPE => ExitCode::SUCCESS,
        Err(DataError(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command, seed: Option<u64>) -> Result<()> {
    match command {
        Command::Featurize {
            manifest,
            out,
            min_pad_seconds,
        } => featurize(&manifest, &out, min_pad_seconds),
        Command::Normalize { lang, input } => normalize(lang, input.as_deref()),
        Command::Phonemize(args) => phonemize_cmd(args),
        Command::Simulate(args) => simulate(args, seed.unwrap_or(0)),
        Command::Train { config, out } => train(&config, &out, seed),
        Command::Decode {
            checkpoint,
            manifest,
            inventory,
            min_pad_seconds,
        } => decode(
            &checkpoint,
            &manifest,
            inventory.as_deref(),
            min_pad_seconds,
        ),
        Command::Eval {
            refs,
            hyps,
            granularity,
        } => eval(&refs, &hyps, granularity),
        Command::Baseline(cmd) => baseline_cmd(cmd, seed.unwrap_or(0)),
        Command::Synthgen {
            n,
            vocab,
            inventory,
            out,
        } => synthgen(n, &vocab, &inventory, &out, seed.unwrap_or(0)),
    }
}

fn input_lines(input: Option<&Path>) -> Result<Vec<String>> {
    match input {
        Some(p) => Ok(fs::read_to_string(p)
            .map_err(|e| fail(format!("reading {}: {e}", p.display())))?
            .lines()
            .map(str::to_string)
            .collect()),
        None => Ok(io::stdin().lock().lines().collect::<io::Result<_>>()?),
    }
}

/// A shipped inventory tag, or a file with one label per line (blank first).
fn resolve_inventory(spec: &str) -> Result<PhonemeInventory> {
    if let Ok(inv) = phonemize::load_inventory_str(spec) {
        return Ok(inv);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(fail(format!(
            "`{spec}` is neither an inventory tag nor a label file"
        )));
    }
    let labels = fs::read_to_string(path)
        .map_err(|e| fail(format!("reading {spec}: {e}")))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    Ok(PhonemeInventory::from_labels(spec, labels)?)
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Ok(Manifest::load(path)?)
}

fn read_manifest_audio(m: &Manifest) -> Result<Vec<AudioBuffer>> {
    m.rows
        .par_iter()
        .map(|row| {
            let p = m.resolve(row);
            audio::read_wav(&p).map_err(|e| fail(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| fail(format!("creating {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| fail(format!("writing {}: {e}", path.display())))
}

fn featurize(manifest: &Path, out: &Path, min_pad: f64) -> Result<()> {
    let m = load_manifest(manifest)?;
    let rows: Vec<ManifestRow> = m
        .rows
        .par_iter()
        .map(|row| {
            let spec = data::featurize_file(&m.resolve(row), min_pad)?;
            let rel = Path::new(&row.audio_path).with_extension(data::FEATURE_EXT);
            let dest = out.join(&rel);
            if let Some(dir) = dest.parent() {
                fs::create_dir_all(dir)?;
            }
            data::write_features(&spec, &dest)?;
            Ok(ManifestRow {
                audio_path: rel.to_string_lossy().into_owned(),
                transcript: row.transcript.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let mut fm = Manifest::new(out);
    fm.rows = rows;
    fm.save(out.join("manifest.tsv"))?;
    info!("wrote {} feature files to {}", fm.len(), out.display());
    Ok(())
}

fn normalize(lang: Language, input: Option<&Path>) -> Result<()> {
    let mut stdout = io::stdout().lock();
    for line in input_lines(input)? {
        let t = textnorm::normalize(&Transcript::new(textnorm::strip_annotations(&line), lang))?;
        writeln!(stdout, "{}", t.text)?;
    }
    Ok(())
}

fn phonemize_cmd(args: PhonemizeArgs) -> Result<()> {
    let inv = args
        .inventory
        .as_deref()
        .map(resolve_inventory)
        .transpose()?;
    let mut stdout = io::stdout().lock();
    if args.dump_inventory {
        let inv = inv.expect("clap requires --inventory");
        for (i, l) in inv.labels().iter().enumerate() {
            writeln!(stdout, "{i}\t{l}")?;
        }
        return Ok(());
    }
    let lang = args.lang.expect("clap requires --lang");
    let lex = match &args.lexicon {
        Some(p) => Lexicon::load(p, lang)?,
        None => Lexicon::seed(lang),
    };
    if let Some(inv) = &inv {
        lex.validate(inv)?;
    }
    for line in input_lines(args.input.as_deref())? {
        let words = phonemize::phonemize_sentence(&line, &lex)?;
        let text: Vec<String> = words.iter().map(|w| w.join(" ")).collect();
        writeln!(stdout, "{}", text.join(&format!(" {} ", phonemize::SPACE)))?;
    }
    Ok(())
}

fn simulate(args: SimulateArgs, seed: u64) -> Result<()> {
    let scenes: Vec<RoomScene> = if args.scenes.is_empty() {
        roomsim::default_geometries()
    } else {
        args.scenes
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p)
                    .map_err(|e| fail(format!("reading {}: {e}", p.display())))?;
                RoomScene::from_json(&text).map_err(|e| fail(format!("{}: {e}", p.display())))
            })
            .collect::<Result<_>>()?
    };
    let m = load_manifest(&args.manifest)?;
    let targets = read_manifest_audio(&m)?;
    let pool = |p: &Option<PathBuf>| -> Result<Vec<AudioBuffer>> {
        match p {
            Some(p) => read_manifest_audio(&load_manifest(p)?),
            None => Ok(targets.clone()),
        }
    };
    let (babble, noise) = (pool(&args.babble_pool)?, pool(&args.noise_pool)?);
    let outputs = roomsim::augment_corpus(&targets, &scenes, &babble, &noise, seed)?;
    let mut om = Manifest::new(&args.out);
    fs::create_dir_all(&args.out)
        .map_err(|e| fail(format!("creating {}: {e}", args.out.display())))?;
    for a in &outputs {
        let row = &m.rows[a.utterance];
        let stem = Path::new(&row.audio_path).with_extension("");
        let rel = format!("{}_g{}.wav", stem.to_string_lossy(), a.geometry + 1);
        let dest = args.out.join(&rel);
        if let Some(dir) = dest.parent() {
            fs::create_dir_all(dir)?;
        }
        audio::write_wav(&a.audio, &dest)?;
        om.rows.push(ManifestRow {
            audio_path: rel,
            transcript: row.transcript.clone(),
        });
    }
    om.save(args.out.join("manifest.tsv"))?;
    info!(
        "{} utterances x {} scenes -> {} rows",
        m.len(),
        scenes.len(),
        om.len()
    );
    Ok(())
}

fn train(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = TrainConfig::load(config_path)?;
    let inv = resolve_inventory(&cfg.inventory)?;
    let mut opts = cfg.options.clone();
    if let Some(s) = seed {
        opts.seed = s;
    }
    if opts.model.n_classes == 0 {
        opts.model.n_classes = inv.len();
    } else if opts.model.n_classes != inv.len() {
        return Err(fail(format!(
            "model has {} classes but inventory {} has {}",
            opts.model.n_classes,
            inv.name(),
            inv.len()
        )));
    }
    let load = |p: &Path| -> Result<Vec<data::Example>> {
        let m = load_manifest(p)?;
        Ok(data::load_examples(
            &m,
            &cfg.transcripts,
            &inv,
            cfg.min_pad_seconds,
        )?)
    };
    let all_train = load(&cfg.train_manifest)?;
    let (train, val) = match &cfg.val_manifest {
        Some(p) => (all_train, load(p)?),
        None => {
            let (tr, va) = data::split_indices(all_train.len(), cfg.val_fraction, opts.seed);
            let pick = |idx: &[usize]| {
                idx.iter()
                    .map(|&i| all_train[i].clone())
                    .collect::<Vec<_>>()
            };
            (pick(&tr), pick(&va))
        }
    };
    info!(
        "{} training and {} validation utterances",
        train.len(),
        val.len()
    );
    fs::create_dir_all(out).map_err(|e| fail(format!("creating {}: {e}", out.display())))?;
    write_out(
        &out.join("inventory.txt"),
        &(inv.labels().join("\n") + "\n"),
    )?;
    write_out(
        &out.join("train_options.json"),
        &serde_json::to_string_pretty(&opts)?,
    )?;
    let state = phonorec::train::train_loop(&opts, &train, &val, Some(out))?;
    let last = state.history.last().expect("at least one epoch");
    writeln!(
        io::stdout(),
        "epochs={} train_per={:.4} val_per={:.4} best_val_epoch={} ratio_zone_epoch={}",
        last.epoch,
        last.train_per,
        last.val_per,
        state
            .best_val
            .as_ref()
            .map_or("none".into(), |b| b.0.to_string()),
        state
            .ratio_zone
            .as_ref()
            .map_or("none".into(), |b| b.0.to_string()),
    )?;
    Ok(())
}

fn decode(checkpoint: &Path, manifest: &Path, inventory: Option<&str>, min_pad: f64) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let inv = match inventory {
        Some(spec) => resolve_inventory(spec)?,
        None => {
            let beside = checkpoint.with_file_name("inventory.txt");
            resolve_inventory(&beside.to_string_lossy())?
        }
    };
    if inv.len() != model.config.n_classes {
        return Err(fail(format!(
            "checkpoint predicts {} classes, inventory {} has {}",
            model.config.n_classes,
            inv.name(),
            inv.len()
        )));
    }
    let m = load_manifest(manifest)?;
    let hyps: Vec<String> = m
        .rows
        .par_iter()
        .map(|row| {
            let spec = data::load_features(&m.resolve(row), min_pad)?;
            Ok(greedy_decode(&model.infer(&spec)?, &inv).join(" "))
        })
        .collect::<Result<_>>()?;
    let mut stdout = io::stdout().lock();
    for (row, h) in m.rows.iter().zip(hyps) {
        writeln!(stdout, "{}\t{h}", row.audio_path)?;
    }
    Ok(())
}

/// `id<TAB>text` lines.
fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text =
        fs::read_to_string(path).map_err(|e| fail(format!("reading {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (id, t) = l.split_once('\t').ok_or_else(|| {
                fail(format!(
                    "{}:{}: expected `id<TAB>text`",
                    path.display(),
                    i + 1
                ))
            })?;
            Ok((id.to_string(), t.to_string()))
        })
        .collect()
}

fn eval(refs: &Path, hyps: &Path, g: Granularity) -> Result<()> {
    let r = read_pairs(refs)?;
    let h: std::collections::HashMap<String, String> = read_pairs(hyps)?.into_iter().collect();
    let mut ref_texts = Vec::with_capacity(r.len());
    let mut hyp_texts = Vec::with_capacity(r.len());
    for (id, text) in r {
        let hyp = h
            .get(&id)
            .ok_or_else(|| fail(format!("{} has no hypothesis for `{id}`", hyps.display())))?;
        ref_texts.push(text);
        hyp_texts.push(hyp.clone());
    }
    let ref_s: Vec<&str> = ref_texts.iter().map(String::as_str).collect();
    let hyp_s: Vec<&str> = hyp_texts.iter().map(String::as_str).collect();
    let report = metrics::error_rate_str(&ref_s, &hyp_s, g)?;
    let name = match g {
        Granularity::Phoneme => "per",
        Granularity::Word => "wer",
        Granularity::Char => "cer",
    };
    writeln!(io::stdout(), "{name}={:.4}", report.rate)?;
    writeln!(io::stdout(), "{}", serde_json::to_string(&report)?)?;
    Ok(())
}

fn labelled_features(manifest: &Path) -> Result<(Vec<Vec<f64>>, Vec<String>, Manifest)> {
    let m = load_manifest(manifest)?;
    let audio = read_manifest_audio(&m)?;
    let x = audio
        .par_iter()
        .map(baseline::utterance_features)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let labels = m
        .rows
        .iter()
        .map(|r| r.transcript.trim().to_string())
        .collect();
    Ok((x, labels, m))
}

fn baseline_cmd(cmd: BaselineCommand, seed: u64) -> Result<()> {
    match cmd {
        BaselineCommand::Fit {
            manifest,
            out,
            k,
            c,
            folds,
        } => {
            let (x, labels, _) = labelled_features(&manifest)?;
            let (k, c) = match (k, c) {
                (Some(k), Some(c)) => (k, c),
                _ => {
                    let (k, c, acc) = baseline::select_hyperparameters(&x, &labels, folds, seed)?;
                    writeln!(io::stdout(), "selected k={k} c={c} cv_accuracy={acc:.4}")?;
                    (k, c)
                }
            };
            let model = BaselineModel::fit(&x, &labels, k, c)?;
            write_out(&out, &serde_json::to_string_pretty(&model)?)?;
            let pred: Vec<String> = x.iter().map(|f| model.predict(f).to_string()).collect();
            writeln!(
                io::stdout(),
                "train_accuracy={:.4}",
                baseline::accuracy(&labels, &pred)
            )?;
        }
        BaselineCommand::Predict { model, manifest } => {
            let text = fs::read_to_string(&model)
                .map_err(|e| fail(format!("reading {}: {e}", model.display())))?;
            let model: BaselineModel = serde_json::from_str(&text)
                .map_err(|e| fail(format!("{}: {e}", manifest.display())))?;
            let (x, labels, m) = labelled_features(&manifest)?;
            let pred: Vec<String> = x.iter().map(|f| model.predict(f).to_string()).collect();
            let mut stdout = io::stdout().lock();
            for (row, p) in m.rows.iter().zip(&pred) {
                writeln!(stdout, "{}\t{p}", row.audio_path)?;
            }
            eprintln!("accuracy={:.4}", baseline::accuracy(&labels, &pred));
        }
        BaselineCommand::Cv {
            manifest,
            outer,
            inner,
        } => {
            let (x, labels, _) = labelled_features(&manifest)?;
            let report = baseline::nested_cv(&x, &labels, outer, inner, seed)?;
            writeln!(io::stdout(), "accuracy={:.4}", report.mean_accuracy)?;
            writeln!(io::stdout(), "{}", serde_json::to_string(&report)?)?;
        }
    }
    Ok(())
}

fn synthgen(n: usize, vocab: &str, inventory: &str, out: &Path, seed: u64) -> Result<()> {
    let inv = resolve_inventory(inventory)?;
    let vocab: Vec<&str> = vocab.split_whitespace().collect();
    if vocab.len() < 2 {
        return Err(fail("synthgen needs at least two phonemes"));
    }
    if let Some(bad) = vocab
        .iter()
        .find(|p| !inv.contains(p) || inv.id(p) == Some(0))
    {
        return Err(fail(format!(
            "`{bad}` is not a phoneme of inventory {}",
            inv.name()
        )));
    }
    let m = data::write_synth_corpus(out, &data::synthgen(n, &vocab, seed))?;
    info!("wrote {} utterances to {}", m.len(), out.display());
    Ok(())
}
