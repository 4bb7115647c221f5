//! `kmod`: train, ablate, evaluate and manage task deltas.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error, 3 integrity error (a delta or checkpoint that does not match).

mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Arg, ArgAction, ArgMatches, Command};
use kmod::delta::{
    apply_delta, export_delta, fingerprint, fingerprint_hex, load_checkpoint, memory_report, save_checkpoint,
    verify_delta, KmDelta,
};
use kmod::net::{build_network, ParamGroupMask};
use kmod::train::{evaluate, run_ablation, train, AblationAxis, AblationBase, RunResult};
use kmod::KmError;
use settings::{Settings, KEYS};

const SWITCHES: [&str; 5] = ["train-conv", "train-implicit", "train-explicit", "train-classifier", "decay-all"];

const MB: f64 = 1e6;

fn exit_code(e: &KmError) -> u8 {
    match e {
        KmError::Config(_) | KmError::Contract(_) => 2,
        KmError::Integrity(_) | KmError::Decode(_) => 3,
        _ => 1,
    }
}

fn settings_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("flat key=value file; flags override it")];
    for &(key, default) in KEYS {
        let arg = Arg::new(key).long(key);
        args.push(if SWITCHES.contains(&key) {
            arg.action(ArgAction::SetTrue)
        } else {
            let arg = arg.value_name("VALUE");
            match default {
                Some(d) => arg.help(format!("default {d}")),
                None => arg,
            }
        });
    }
    args
}

fn resolve(m: &ArgMatches) -> kmod::Result<Settings> {
    let mut flags = Vec::new();
    for &(key, _) in KEYS {
        if SWITCHES.contains(&key) {
            if m.get_flag(key) {
                flags.push((key.to_string(), "true".to_string()));
            }
        } else if let Some(v) = m.get_one::<String>(key) {
            flags.push((key.to_string(), v.clone()));
        }
    }
    Settings::resolve(m.get_one::<String>("config").map(Path::new), &flags)
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("PATH").required(true).help(help)
}

fn cli() -> Command {
    Command::new("kmod")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Kernel-modulation training, ablations and task deltas")
        .subcommand_required(true)
        .subcommand(
            Command::new("train")
                .about("train one network and write metrics, report, manifest and checkpoints")
                .args(settings_args())
                .arg(path_arg("out", "output directory")),
        )
        .subcommand(
            Command::new("ablate")
                .about("vary one modulator property over several seeds")
                .args(settings_args())
                .arg(path_arg("out", "output directory")),
        )
        .subcommand(
            Command::new("eval")
                .about("evaluate a checkpoint on the configured test split")
                .args(settings_args())
                .arg(path_arg("checkpoint", "checkpoint file")),
        )
        .subcommand(
            Command::new("delta")
                .about("export, apply, verify or size task deltas")
                .subcommand_required(true)
                .subcommand(
                    Command::new("export")
                        .arg(path_arg("checkpoint", "trained checkpoint"))
                        .arg(Arg::new("task").long("task").required(true))
                        .arg(path_arg("out", "delta file to write")),
                )
                .subcommand(
                    Command::new("apply")
                        .arg(path_arg("base", "base checkpoint"))
                        .arg(path_arg("delta", "delta file"))
                        .arg(path_arg("out", "merged checkpoint to write")),
                )
                .subcommand(
                    Command::new("verify")
                        .arg(path_arg("base", "base checkpoint"))
                        .arg(path_arg("delta", "delta file")),
                )
                .subcommand(
                    Command::new("report")
                        .arg(Arg::new("base-mb").long("base-mb").required(true).value_parser(clap::value_parser!(f64)))
                        .arg(Arg::new("fraction").long("fraction").value_parser(clap::value_parser!(f64)))
                        .arg(Arg::new("per-task-mb").long("per-task-mb").value_parser(clap::value_parser!(f64)))
                        .arg(Arg::new("tasks").long("tasks").required(true).value_parser(clap::value_parser!(u64))),
                ),
        )
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write(path: &Path, text: &str) -> kmod::Result<()> {
    fs::write(path, text).map_err(|e| KmError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> kmod::Result<()> {
    fs::create_dir_all(path).map_err(|e| KmError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn manifest(settings: &Settings, seeds: &str, started: u64) -> String {
    let command_line: Vec<String> = std::env::args().collect();
    let mut out = String::new();
    out.push_str(&format!("command_line={}\n", command_line.join(" ")));
    out.push_str(&format!("config_digest={}\n", settings.digest()));
    out.push_str(&format!("seeds={seeds}\n"));
    out.push_str(&format!("version={}\n", env!("CARGO_PKG_VERSION")));
    out.push_str(&format!("started_unix={started}\n"));
    out.push_str(&format!("finished_unix={}\n", now()));
    out.push_str(&format!(
        "km_deterministic={}\n",
        std::env::var("KM_DETERMINISTIC").unwrap_or_else(|_| "unset".into())
    ));
    out.push_str("[config]\n");
    out.push_str(&settings.to_text());
    out
}

fn curve(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",")
}

fn report(task: &str, mask: ParamGroupMask, r: &RunResult, fp: &str) -> String {
    format!(
        "task={task}\nmask={mask}\nfinal_test_accuracy={:.6}\nfinal_train_accuracy={:.6}\n\
         trainable_params={}\ntotal_params={}\naccuracy_curve={}\nloss_curve={}\nbase_fingerprint={fp}\n",
        r.final_test_accuracy,
        r.final_train_accuracy,
        r.trainable_params,
        r.total_params,
        curve(&r.accuracy_curve),
        curve(&r.loss_curve),
    )
}

fn cmd_train(m: &ArgMatches) -> kmod::Result<()> {
    let started = now();
    let settings = resolve(m)?;
    let mask = settings.mask(ParamGroupMask::KERNEL_MODULATION)?;
    let cfg = settings.train_config()?;
    let out = PathBuf::from(m.get_one::<String>("out").expect("required"));
    let (train_data, test_data) = settings.datasets()?;
    let [_, c, h, w] = train_data.images.shape() else {
        unreachable!("datasets are 4-d")
    };
    let spec = settings.network_spec([*c, *h, *w], train_data.class_count)?;
    let mut net = build_network(spec, mask, cfg.seed)?;
    let base = net.clone();
    create_dir(&out)?;

    let mut metrics = String::new();
    let result = train(&mut net, &train_data, Some(&test_data), &cfg, &mut |e| {
        println!("{e}");
        metrics.push_str(&format!("{e}\n"));
    })?;
    let task = settings.task_name();
    let fp = fingerprint_hex(&fingerprint(&net));
    write(&out.join("metrics.txt"), &metrics)?;
    write(&out.join("report.txt"), &report(&task, mask, &result, &fp))?;
    save_checkpoint(&net, out.join("model.kmc"))?;
    if !mask.convolution {
        save_checkpoint(&base, out.join("base.kmc"))?;
        export_delta(&net, &task)?.write(out.join("task.kmd"))?;
    }
    write(&out.join("manifest.txt"), &manifest(&settings, &cfg.seed.to_string(), started))?;
    println!(
        "final test_acc={:.6} train_acc={:.6} trainable={} total={}",
        result.final_test_accuracy, result.final_train_accuracy, result.trainable_params, result.total_params
    );
    Ok(())
}

fn cmd_ablate(m: &ArgMatches) -> kmod::Result<()> {
    let started = now();
    let settings = resolve(m)?;
    let need = |k: &str| {
        settings
            .get(k)
            .map(str::to_string)
            .ok_or_else(|| KmError::Config(format!("ablate needs --{k}")))
    };
    let axis: AblationAxis = need("axis")?.parse()?;
    let values = need("values")?
        .split(',')
        .map(|v| axis.parse_value(v))
        .collect::<kmod::Result<Vec<_>>>()?;
    let n_seeds: u64 = need("seeds")?
        .parse()
        .map_err(|_| KmError::Config("seeds must be a count".into()))?;
    if n_seeds == 0 {
        return Err(KmError::Config("seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let mask = settings.mask(ParamGroupMask::KERNEL_MODULATION)?;
    let cfg = settings.train_config()?;
    let out = PathBuf::from(m.get_one::<String>("out").expect("required"));
    let (train_data, test_data) = settings.datasets()?;
    let [_, c, h, w] = train_data.images.shape() else {
        unreachable!("datasets are 4-d")
    };
    let base = AblationBase {
        spec: settings.network_spec([*c, *h, *w], train_data.class_count)?,
        mask,
        train: cfg,
        train_data: &train_data,
        test_data: &test_data,
    };
    create_dir(&out)?;
    let table = run_ablation(&values, &base, &seeds, &mut |v, seed, r| {
        println!("{}={} seed={seed} acc={:.6}", axis.name(), v.label(), r.final_test_accuracy);
    })?;
    let tsv = table.to_tsv();
    print!("{tsv}");
    write(&out.join("ablation.tsv"), &tsv)?;
    let seed_list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    write(&out.join("manifest.txt"), &manifest(&settings, &seed_list.join(","), started))?;
    Ok(())
}

fn cmd_eval(m: &ArgMatches) -> kmod::Result<()> {
    let settings = resolve(m)?;
    let net = load_checkpoint(m.get_one::<String>("checkpoint").expect("required"))?;
    let (_, test_data) = settings.datasets()?;
    let (loss, acc) = evaluate(&net, &test_data)?;
    println!("split=test loss={loss:.6} acc={acc:.6}");
    Ok(())
}

fn cmd_delta(m: &ArgMatches) -> kmod::Result<()> {
    let path = |sub: &ArgMatches, k: &str| PathBuf::from(sub.get_one::<String>(k).expect("required"));
    match m.subcommand() {
        Some(("export", sub)) => {
            let net = load_checkpoint(path(sub, "checkpoint"))?;
            let delta = export_delta(&net, sub.get_one::<String>("task").expect("required"))?;
            delta.write(path(sub, "out"))?;
            println!(
                "wrote {} bytes ({} values) for base {}",
                delta.byte_len(),
                delta.payload_values(),
                fingerprint_hex(&delta.base_fingerprint)
            );
        }
        Some(("apply", sub)) => {
            let base = load_checkpoint(path(sub, "base"))?;
            let merged = apply_delta(&base, &KmDelta::read(path(sub, "delta"))?)?;
            save_checkpoint(&merged, path(sub, "out"))?;
            println!("merged checkpoint written");
        }
        Some(("verify", sub)) => {
            let base = load_checkpoint(path(sub, "base"))?;
            let delta = KmDelta::read(path(sub, "delta"))?;
            verify_delta(&base, &delta)?;
            println!("ok task={}", delta.task_name().unwrap_or("?"));
        }
        Some(("report", sub)) => {
            let base_mb = *sub.get_one::<f64>("base-mb").expect("required");
            let per_task_mb = match (sub.get_one::<f64>("per-task-mb"), sub.get_one::<f64>("fraction")) {
                (Some(p), None) => *p,
                (None, Some(f)) => base_mb * f,
                _ => return Err(KmError::Config("give exactly one of --fraction or --per-task-mb".into())),
            };
            let bytes = |mb: f64| -> kmod::Result<u64> {
                if mb.is_finite() && mb > 0.0 {
                    Ok((mb * MB).round() as u64)
                } else {
                    Err(KmError::Config(format!("sizes must be positive, got {mb}")))
                }
            };
            let tasks = *sub.get_one::<u64>("tasks").expect("required");
            let r = memory_report(bytes(base_mb)?, bytes(per_task_mb)?, tasks)?;
            println!("base_mb={:.3}", r.base_bytes as f64 / MB);
            println!("per_task_mb={:.3}", r.per_task_bytes as f64 / MB);
            println!("tasks={}", r.task_count);
            println!("naive_total_mb={:.1}", r.naive_total_bytes as f64 / MB);
            println!("km_total_mb={:.1}", r.km_total_bytes as f64 / MB);
            println!("reduction_factor={:.1}", r.reduction_factor);
            println!("per_task_factor={:.1}", r.per_task_factor);
        }
        _ => unreachable!("subcommand required"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("train", m)) => cmd_train(m),
        Some(("ablate", m)) => cmd_ablate(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("delta", m)) => cmd_delta(m),
        _ => unreachable!("subcommand required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
