//! The `rseg` command line.
//!
//! Every subcommand has a fixed table of keys, exposed as `--key` flags.
//! Values are resolved from the table defaults, then an optional
//! `--config FILE` of `key = value` lines, then flags given explicitly. The resolved set is printed first as a valid
//! config file, so any run can be repeated with `--config`.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::parser::ValueSource;
use clap::{Arg, ArgMatches, Command};
use indexmap::IndexMap;

use crate::data::{
    generate_phantom, load_intensities, load_mask, phantom_seeds, save_volume, PhantomSpec, VolumeFile, VolumeMask,
};
use crate::gradcheck::{check_backbone, check_ops};
use crate::kv;
use crate::loss::LossWeights;
use crate::metrics::{evaluate, write_csv, MetricsReport};
use crate::model::{build_model, Backbone, ModelConfig};
use crate::recurrent::{prepare_sequence, segment_volume, SliceSequence};
use crate::train::{load_checkpoint, save_checkpoint, train, AdamConfig, TrainConfig};

#[derive(Debug)]
enum CliError {
    /// Bad invocation; usage is printed.
    Usage(String),
    /// Well-formed invocation with invalid values.
    Invalid(String),
    /// Failure while doing the work.
    Runtime(String),
}

impl CliError {
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Invalid(m) | CliError::Runtime(m) => m,
        }
    }

    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

struct Key {
    name: &'static str,
    /// `None` marks a required key.
    default: Option<&'static str>,
    /// Boolean switch: `--name` alone means true.
    switch: bool,
    help: &'static str,
}

const fn req(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: None,
        switch: false,
        help,
    }
}

const fn opt(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Some(default),
        switch: false,
        help,
    }
}

const fn switch(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Some("false"),
        switch: true,
        help,
    }
}

const THREADS: Key = opt("threads", "0", "worker threads (0 = all cores, 1 = bit-deterministic)");

const SYNTH: &[Key] = &[
    req("out", "output directory"),
    opt("count", "4", "number of phantoms"),
    opt("size", "16x48x48", "volume dims DxHxW"),
    opt("seed", "0", "base seed; phantom i uses the i-th draw of its stream"),
    switch("decoys", "add a look-alike decoy structure"),
    switch("streaks", "add bright artifact chords"),
    opt("noise", "50", "Gaussian noise sigma"),
    opt("spacing", "1x0.5x0.5", "voxel spacing in mm, ZxYxX"),
    opt("object_intensity", "1500", "object intensity"),
    opt("decoy_intensity", "1500", "decoy intensity"),
    opt("background_intensity", "40", "background intensity"),
    THREADS,
];

const TRAIN: &[Key] = &[
    req("data", "training directory of NAME.img.mvf / NAME.mask.mvf pairs"),
    req("val", "validation directory, same layout"),
    req("out", "checkpoint path (.rsck); the history CSV goes beside it"),
    opt("backbone", "unet", "unet, segunet or attunet"),
    switch("recurrent", "feed the previous prediction as a second channel"),
    opt("bptt", "detach", "detach or full"),
    switch("teacher_forcing", "feed ground-truth previous labels while training"),
    opt("levels", "4", "down-sampling stages"),
    opt("base_channels", "16", "channels of the first level"),
    opt("bn_eps", "1e-5", "batch-norm epsilon"),
    opt("bn_momentum", "0.1", "batch-norm running-statistics momentum"),
    opt("eval_norm", "slice", "inference normalization: slice or running"),
    opt("direction", "ascending", "slice order: ascending or descending"),
    opt("window_lo", "300", "intensity window lower bound"),
    opt("window_hi", "2000", "intensity window upper bound"),
    opt("epochs", "40", "maximum epochs"),
    opt("lr", "1e-4", "Adam learning rate"),
    opt(
        "patience",
        "10",
        "epochs without validation improvement before stopping",
    ),
    opt("omega1", "0.5", "BCE weight"),
    opt("omega2", "0.5", "Dice weight"),
    opt("dice_smooth", "1e-6", "Dice smoothing"),
    opt("seed", "0", "initialization and shuffle seed"),
    opt("threshold", "0.5", "probability threshold for validation Dice"),
    opt("max_seq_len", "8", "training chunk length in slices"),
    opt("target_dice", "none", "stop once validation Dice reaches this"),
    opt("beta1", "0.9", "Adam beta1"),
    opt("beta2", "0.999", "Adam beta2"),
    opt("adam_eps", "1e-8", "Adam epsilon"),
    THREADS,
];

const SEGMENT: &[Key] = &[
    req("model", "checkpoint (.rsck)"),
    req("in", "intensity volume (.mvf)"),
    req("out", "output mask (.mvf)"),
    opt("threshold", "0.5", "probability threshold (strict)"),
    THREADS,
];

const EVALUATE: &[Key] = &[
    req("pred", "predicted mask file, or a directory of them"),
    req("gt", "ground-truth mask file, or a directory with the same file names"),
    req("csv", "report path"),
    opt("scan_id", "", "row id for a single pair (default: file stem)"),
    THREADS,
];

const GRADCHECK: &[Key] = &[
    opt("backbone", "all", "unet, segunet, attunet or all"),
    opt("eps", "1e-5", "finite-difference step"),
    opt("dtype", "f64", "only f64 is supported"),
    opt("seed", "0", "first seed"),
    opt("seeds", "1", "number of consecutive seeds"),
    opt("tol", "1e-3", "maximum accepted relative error"),
    opt("extent", "16", "input height and width"),
    opt("probe", "24", "elements probed per parameter tensor"),
    THREADS,
];

const COMMANDS: &[(&str, &[Key], &str)] = &[
    ("synth", SYNTH, "generate synthetic phantoms"),
    ("train", TRAIN, "train a model"),
    ("segment", SEGMENT, "segment a volume"),
    ("evaluate", EVALUATE, "score masks against ground truth"),
    ("gradcheck", GRADCHECK, "finite-difference gradient checks"),
];

fn command() -> Command {
    let mut root = Command::new("rseg")
        .about("Recurrent slice-sequence segmentation")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(name, keys, about) in COMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value file; flags given here override it"),
        );
        for k in keys {
            let mut arg = Arg::new(k.name).long(k.name).help(k.help);
            let dashed = k.name.replace('_', "-");
            if dashed != k.name {
                arg = arg.alias(dashed);
            }
            arg = if k.switch {
                arg.num_args(0..=1)
                    .require_equals(true)
                    .default_missing_value("true")
                    .value_name("BOOL")
            } else {
                arg.value_name("VALUE")
            };
            if let Some(d) = k.default {
                arg = arg.default_value(d);
            }
            sub = sub.arg(arg);
        }
        root = root.subcommand(sub);
    }
    root
}

/// Resolved `key = value` settings of one invocation, in table order.
struct Settings {
    values: IndexMap<String, String>,
}

impl Settings {
    /// Table defaults, then the `--config` file, then explicit flags.
    fn resolve(keys: &[Key], m: &ArgMatches) -> Result<Self, CliError> {
        let given = |name: &str| {
            (m.value_source(name) == Some(ValueSource::CommandLine))
                .then(|| m.get_one::<String>(name).cloned())
                .flatten()
        };
        let mut file = IndexMap::new();
        if let Some(path) = m.get_one::<String>("config") {
            let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read config {path}: {e}")))?;
            file = kv::parse(&text).map_err(|e| invalid(format!("{path}: {e}")))?;
            if let Some(k) = file.keys().find(|k| !keys.iter().any(|key| key.name == k.as_str())) {
                return Err(invalid(format!("{path}: unknown key {k:?}")));
            }
        }
        let mut values = IndexMap::new();
        for k in keys {
            let v = given(k.name)
                .or_else(|| file.get(k.name).cloned())
                .or_else(|| k.default.map(str::to_string))
                .ok_or_else(|| CliError::Usage(format!("missing required --{}", k.name)))?;
            if k.switch {
                kv::parse_bool(&v).map_err(|e| invalid(format!("--{}: {e}", k.name)))?;
            }
            values.insert(k.name.to_string(), v);
        }
        Ok(Self { values })
    }

    fn raw(&self, key: &str) -> &str {
        &self.values[key]
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| invalid(format!("--{key} {raw:?}: {e}")))
    }

    fn flag(&self, key: &str) -> bool {
        kv::parse_bool(self.raw(key)).unwrap_or(false)
    }

    fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.raw(key))
    }

    fn banner(&self, command: &str) -> String {
        let mut s = format!("# rseg {command} effective config\n");
        s.push_str(&kv::render(self.values.iter().map(|(k, v)| (k.as_str(), v.clone()))));
        s
    }
}

fn parse_triple<T: FromStr>(key: &str, raw: &str) -> Result<[T; 3], CliError> {
    let parts: Vec<&str> = raw.split('x').collect();
    let bad = || invalid(format!("--{key} {raw:?}: expected AxBxC"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut it = parts.into_iter().map(|p| p.trim().parse::<T>().map_err(|_| bad()));
    Ok([it.next().unwrap()?, it.next().unwrap()?, it.next().unwrap()?])
}

/// Runs one invocation (`args` excludes the program name) and returns the
/// exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn run_cli_with(args: &[String], out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32 {
    let mut cmd = command();
    let matches = match cmd.try_get_matches_from_mut(std::iter::once("rseg".to_string()).chain(args.iter().cloned())) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = write!(out, "{}", e.render());
            return 0;
        }
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return 1;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let keys = COMMANDS.iter().find(|(n, ..)| *n == name).expect("command table").1;
    let result = Settings::resolve(keys, sub).and_then(|s| {
        let threads: usize = s.get("threads")?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(runtime)?;
        let _ = write!(out, "{}", s.banner(name));
        pool.install(|| match name {
            "synth" => synth(&s, out),
            "train" => train_cmd(&s, out),
            "segment" => segment(&s, out),
            "evaluate" => evaluate_cmd(&s, out),
            "gradcheck" => gradcheck(&s, out),
            _ => unreachable!("command table"),
        })
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            if let CliError::Usage(_) = e {
                let _ = write!(
                    err,
                    "\n{}\n",
                    cmd.find_subcommand_mut(name).expect("command table").render_usage()
                );
            }
            e.code()
        }
    }
}

/// [`run_cli_with`] on the process's standard streams.
pub fn run_cli(args: &[String]) -> i32 {
    run_cli_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}

fn synth(s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let count: usize = s.get("count")?;
    let base = PhantomSpec {
        dims: parse_triple("size", s.raw("size"))?,
        noise_sigma: s.get("noise")?,
        decoys: s.flag("decoys"),
        artifact_streaks: s.flag("streaks"),
        object_intensity: s.get("object_intensity")?,
        decoy_intensity: s.get("decoy_intensity")?,
        background_intensity: s.get("background_intensity")?,
        spacing: parse_triple("spacing", s.raw("spacing"))?,
        seed: s.get("seed")?,
    };
    base.validate().map_err(invalid)?;
    let dir = s.path("out");
    fs::create_dir_all(&dir).map_err(runtime)?;
    for (i, seed) in phantom_seeds(base.seed, count).into_iter().enumerate() {
        let (vol, mask) = generate_phantom(&PhantomSpec { seed, ..base.clone() }).map_err(runtime)?;
        let stem = format!("phantom_{i:03}");
        save_volume(&VolumeFile::Volume(vol), dir.join(format!("{stem}.img.mvf"))).map_err(runtime)?;
        save_volume(&VolumeFile::Mask(mask.clone()), dir.join(format!("{stem}.mask.mvf"))).map_err(runtime)?;
        let _ = writeln!(out, "{stem}: seed {seed}, {} object voxels", mask.count());
    }
    Ok(())
}

/// `NAME.img.mvf` / `NAME.mask.mvf` pairs of a directory, sorted by name.
fn load_pairs(dir: &Path, config: &ModelConfig) -> Result<Vec<SliceSequence<f32>>, CliError> {
    let mut stems: Vec<String> = fs::read_dir(dir)
        .map_err(|e| runtime(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix(".img.mvf"))
                .map(str::to_string)
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(invalid(format!("{}: no *.img.mvf volumes", dir.display())));
    }
    stems
        .iter()
        .map(|stem| {
            let vol = load_intensities(dir.join(format!("{stem}.img.mvf"))).map_err(runtime)?;
            let mask = load_mask(dir.join(format!("{stem}.mask.mvf"))).map_err(runtime)?;
            prepare_sequence(config, &vol, Some(&mask)).map_err(runtime)
        })
        .collect()
}

fn history_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("history.csv")
}

fn train_cmd(s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let model = ModelConfig {
        backbone: s.get::<Backbone>("backbone")?,
        levels: s.get("levels")?,
        base_channels: s.get("base_channels")?,
        recurrent: s.flag("recurrent"),
        bn_eps: s.get("bn_eps")?,
        bn_momentum: s.get("bn_momentum")?,
        eval_norm: s.get("eval_norm")?,
        direction: s.get("direction")?,
        window: (s.get("window_lo")?, s.get("window_hi")?),
    };
    model.validate().map_err(invalid)?;
    let target_dice = match s.raw("target_dice") {
        "none" | "" => None,
        _ => Some(s.get("target_dice")?),
    };
    let tc = TrainConfig {
        lr: s.get("lr")?,
        epochs: s.get("epochs")?,
        patience: s.get("patience")?,
        weights: LossWeights {
            omega1: s.get("omega1")?,
            omega2: s.get("omega2")?,
        },
        dice_smooth: s.get("dice_smooth")?,
        seed: s.get("seed")?,
        bptt: s.get("bptt")?,
        teacher_forcing: s.flag("teacher_forcing"),
        threshold: s.get("threshold")?,
        max_seq_len: s.get("max_seq_len")?,
        target_dice,
        adam: AdamConfig {
            beta1: s.get("beta1")?,
            beta2: s.get("beta2")?,
            eps: s.get("adam_eps")?,
        },
    };
    tc.validate().map_err(invalid)?;
    let train_set = load_pairs(&s.path("data"), &model)?;
    let val_set = load_pairs(&s.path("val"), &model)?;
    let mut store = build_model::<f32>(&model, tc.seed).map_err(invalid)?;
    let _ = writeln!(
        out,
        "training {} ({} parameters) on {} volumes, validating on {}",
        model.backbone,
        store.num_scalars(),
        train_set.len(),
        val_set.len()
    );
    let history = train(&mut store, &model, &tc, &train_set, &val_set, |r| {
        let _ = writeln!(
            out,
            "epoch {:3}  train_loss {:.6}  val_loss {:.6}  val_dice {:.6}",
            r.epoch, r.train_loss, r.val_loss, r.val_dice
        );
    })
    .map_err(runtime)?;
    let ckpt = s.path("out");
    save_checkpoint(&store, &model, &ckpt).map_err(runtime)?;
    let hist = history_path(&ckpt);
    crate::data::write_atomic(&hist, history.to_csv().as_bytes()).map_err(runtime)?;
    let _ = writeln!(
        out,
        "stopped: {}; kept epoch {}; wrote {} and {}",
        history.stop,
        history.best_epoch,
        ckpt.display(),
        hist.display()
    );
    Ok(())
}

fn segment(s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let threshold: f64 = s.get("threshold")?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid(format!("--threshold must lie in (0, 1), got {threshold}")));
    }
    let (store, config) = load_checkpoint(s.path("model")).map_err(|e| runtime(format!("{}: {e}", s.raw("model"))))?;
    let vol = load_intensities(s.path("in")).map_err(|e| runtime(format!("{}: {e}", s.raw("in"))))?;
    let mask = segment_volume(&store, &config, &vol, threshold).map_err(runtime)?;
    save_volume(&VolumeFile::Mask(mask.clone()), s.path("out")).map_err(runtime)?;
    let _ = writeln!(out, "{} foreground voxels -> {}", mask.count(), s.raw("out"));
    Ok(())
}

fn stem_of(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    name.strip_suffix(".mask.mvf")
        .or_else(|| name.strip_suffix(".mvf"))
        .unwrap_or(name)
        .to_string()
}

fn evaluate_cmd(s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let (pred, gt) = (s.path("pred"), s.path("gt"));
    let pairs: Vec<(String, PathBuf, PathBuf)> = if pred.is_dir() {
        if !gt.is_dir() {
            return Err(invalid("--pred is a directory but --gt is not"));
        }
        let mut names: Vec<String> = fs::read_dir(&pred)
            .map_err(runtime)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().map(str::to_string))
            .filter(|n| n.ends_with(".mvf") && !n.ends_with(".img.mvf"))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(invalid(format!("{}: no masks", pred.display())));
        }
        names
            .into_iter()
            .map(|n| (stem_of(Path::new(&n)), pred.join(&n), gt.join(&n)))
            .collect()
    } else {
        let id = match s.raw("scan_id") {
            "" => stem_of(&pred),
            id => id.to_string(),
        };
        vec![(id, pred, gt)]
    };
    let mut reports: Vec<MetricsReport> = Vec::new();
    for (id, p, g) in pairs {
        let load = |path: &Path| -> Result<VolumeMask, CliError> {
            load_mask(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
        };
        let report = evaluate(&load(&p)?, &load(&g)?, id).map_err(invalid)?;
        let _ = writeln!(
            out,
            "{}: dice {:.6} asd {} hd95 {} hd {}",
            report.scan_id,
            report.dice,
            fmt_mm(report.asd_mm),
            fmt_mm(report.hd95_mm),
            fmt_mm(report.hd_mm)
        );
        reports.push(report);
    }
    write_csv(&reports, s.path("csv")).map_err(runtime)?;
    Ok(())
}

fn fmt_mm(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |v| format!("{v:.6} mm"))
}

fn gradcheck(s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    if s.raw("dtype") != "f64" {
        return Err(invalid(format!(
            "--dtype {}: finite-difference checks run in f64 only",
            s.raw("dtype")
        )));
    }
    let backbones: Vec<Backbone> = match s.raw("backbone") {
        "all" => Backbone::ALL.to_vec(),
        _ => vec![s.get("backbone")?],
    };
    let (h, tol): (f64, f64) = (s.get("eps")?, s.get("tol")?);
    let (seed0, seeds): (u64, u64) = (s.get("seed")?, s.get("seeds")?);
    let (extent, probe): (usize, usize) = (s.get("extent")?, s.get("probe")?);
    if !(h > 0.0) || seeds == 0 {
        return Err(invalid("--eps must be positive and --seeds at least 1"));
    }
    let mut worst: f64 = 0.0;
    for seed in seed0..seed0 + seeds {
        for op in check_ops(seed, h).map_err(runtime)? {
            worst = worst.max(op.report.max_rel_error);
            let _ = writeln!(out, "seed {seed} op {:20} {:.3e}", op.name, op.report.max_rel_error);
        }
        for &b in &backbones {
            for recurrent in [false, true] {
                let cfg = ModelConfig::tiny(b, recurrent);
                let r = check_backbone(&cfg, seed, extent, h, probe).map_err(runtime)?;
                worst = worst.max(r.max_rel_error);
                let _ = writeln!(
                    out,
                    "seed {seed} backbone {b:8} recurrent={recurrent:5} {:.3e} ({} elements, {} at kinks skipped)",
                    r.max_rel_error, r.checked, r.skipped
                );
            }
        }
    }
    let _ = writeln!(out, "max relative error {worst:.3e} (tolerance {tol:e})");
    if worst <= tol {
        Ok(())
    } else {
        Err(runtime(format!("max relative error {worst:.3e} exceeds {tol:e}")))
    }
}
