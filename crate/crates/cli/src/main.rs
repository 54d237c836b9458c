use clap::{Arg, ArgAction, ArgMatches, Command};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use voxsteer_core::config::{self, RunConfig, CONFIG_ENV, COMMANDS, REGISTRY};
use voxsteer_core::Error;

mod commands;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInstruction(_) | Error::Contract(_) | Error::Shape { .. } => 2,
        Error::MissingPrerequisite(_) => 3,
        Error::NumericFault(_) | Error::Divergence { .. } | Error::NonDeterministic(_) => 4,
        Error::DegenerateOutput(_) | Error::DegenerateScene(_) | Error::EmptyDataset => 5,
        Error::Io(_) | Error::Encoding(_) | Error::Format(_) => 6,
    }
}

const ABOUT: &[(&str, &str)] = &[
    (config::CMD_GEN_DATA, "generate a filtered edit-pair dataset"),
    (config::CMD_TRAIN, "run one training phase for one stage"),
    (config::CMD_EDIT, "edit a procedural asset with trained checkpoints"),
    (config::CMD_EVAL, "run the benchmark on a dataset"),
    (config::CMD_PLOT, "merge benchmark reports into a scaling-curve CSV"),
];

fn key_help(k: &config::KeySpec) -> String {
    if k.default.is_empty() {
        k.help.to_string()
    } else {
        format!("{} [default: {}]", k.help, k.default)
    }
}

fn registry_listing() -> String {
    let mut s = String::from("Configuration keys (config file `key = value`, or `--key-name value`):\n");
    for k in REGISTRY {
        let scope = if k.commands.is_empty() { "all".to_string() } else { k.commands.join(",") };
        s.push_str(&format!("  {:<22} [{scope}] {}\n", k.key, key_help(k)));
    }
    s.push_str(&format!(
        "\nA config file is read from --config or ${CONFIG_ENV}; flags override it.\n\
         Exit codes: 0 ok, 2 bad arguments, 3 missing prerequisite, 4 numeric fault, 5 degenerate output, 6 i/o error.\n"
    ));
    s
}

fn cli() -> Command {
    let mut root = Command::new("voxsteer")
        .about("Instruction-steered editing of voxel assets with rectified-flow models")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help(registry_listing())
        .arg(Arg::new("config").long("config").global(true).value_name("PATH").help("config file"));
    for &(name, about) in ABOUT {
        let mut sub = Command::new(name).about(about);
        for k in REGISTRY.iter().filter(|k| k.used_by(name)) {
            sub = sub.arg(
                Arg::new(k.key)
                    .long(k.flag())
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .help(key_help(k)),
            );
        }
        root = root.subcommand(sub);
    }
    root
}

fn collect(command: &str, m: &ArgMatches) -> Result<RunConfig, Error> {
    let file = match m.get_one::<String>("config").map(PathBuf::from).or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from)) {
        Some(p) => config::read_config(&p)?,
        None => BTreeMap::new(),
    };
    let mut flags = BTreeMap::new();
    for k in REGISTRY.iter().filter(|k| k.used_by(command)) {
        if let Some(v) = m.get_one::<String>(k.key) {
            flags.insert(k.key.to_string(), v.clone());
        }
    }
    RunConfig::merge(command, file, flags)
}

fn run(command: &str, m: &ArgMatches) -> Result<(), Error> {
    let rc = collect(command, m)?;
    if let Some(n) = rc.get::<usize>("threads")? {
        if n == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match command {
        config::CMD_GEN_DATA => commands::gen_data(&rc),
        config::CMD_TRAIN => commands::train(&rc),
        config::CMD_EDIT => commands::edit(&rc),
        config::CMD_EVAL => commands::eval(&rc),
        config::CMD_PLOT => commands::plot_data(&rc),
        other => Err(Error::Config(format!("unknown command {other}"))),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (command, sub) = matches.subcommand().expect("subcommand required");
    debug_assert!(COMMANDS.contains(&command));
    match run(command, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
