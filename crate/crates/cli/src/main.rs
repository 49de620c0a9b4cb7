use std::fmt;
use std::io::Read;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use pragmos_core::bpmn_io::{export_artifact_json, export_bpmn_xml, import_artifact_json, import_bpmn_xml, Artifact, SlotName};
use pragmos_core::llm_gateway::{
    ChatModel, ProviderConfig, ProviderKind, Recording, ScriptedModel, DEFAULT_API_KEY_ENV,
};
use pragmos_core::relations::{ActivityId, ActivityTable, ExecutionPath};
use pragmos_core::session::{
    create_session, load_session_dir, run_pipeline, run_step, save_session_dir, ErrorFamily, SessionError,
    SessionState, Step,
};
use pragmos_core::synthesis::ProcessModel;
use pragmos_core::verification::{check_soundness, conforms, enumerate_traces, is_block_structured};

/// Turn process descriptions into BPMN models, one reviewable step at a time.
#[derive(Parser, Debug)]
#[command(name = "pragmos", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args, Debug)]
struct Shared {
    /// Session directory to create, read or update
    #[arg(long, global = true, value_name = "DIR")]
    session: Option<PathBuf>,
    /// Language model backend: replay, openai or gemini
    #[arg(long, global = true, value_name = "NAME", env = "PRAGMOS_PROVIDER")]
    provider: Option<String>,
    /// Directory of recorded answers for the replay backend
    #[arg(long, global = true, value_name = "DIR", env = "PRAGMOS_REPLAY_DIR")]
    replay_dir: Option<PathBuf>,
    /// Model name sent to a live backend
    #[arg(long, global = true, value_name = "NAME", env = "PRAGMOS_MODEL")]
    model: Option<String>,
    /// Base URL of a live backend
    #[arg(long, global = true, value_name = "URL", env = "PRAGMOS_BASE_URL")]
    base_url: Option<String>,
    /// Name of the environment variable holding the API key
    #[arg(long, global = true, value_name = "VAR", default_value = DEFAULT_API_KEY_ENV)]
    api_key_env: String,
    /// Extra attempts after an unusable answer
    #[arg(long, global = true, value_name = "N", default_value_t = 2)]
    retries: u32,
    /// Seconds to wait for a live backend
    #[arg(long, global = true, value_name = "SECS", default_value_t = 60)]
    timeout: u64,
    /// Print machine-readable JSON
    #[arg(long, global = true)]
    json: bool,
    /// Write the main result to FILE instead of standard output
    #[arg(long, global = true, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every step on a description file and emit the final BPMN model
    Run {
        /// Text file with the process description
        description: PathBuf,
    },
    /// Run one step of an existing session
    Step {
        #[arg(value_enum)]
        step: StepArg,
    },
    /// Replace an artifact of a session with a reviewed JSON file ("-" reads stdin)
    Override {
        #[arg(value_enum)]
        slot: SlotArg,
        file: PathBuf,
    },
    /// Write a session artifact or its model
    Export {
        #[arg(long, value_enum, default_value = "bpmn")]
        format: Format,
        /// Model version to export instead of the current one
        #[arg(long, value_name = "K")]
        version: Option<u32>,
        /// Export this artifact as JSON instead of the model
        #[arg(long, value_enum)]
        slot: Option<SlotArg>,
    },
    /// List the traces of a model (a .bpmn file, or the current model of --session)
    Traces {
        #[arg(value_name = "MODEL")]
        target: Option<PathBuf>,
        /// How often each loop may repeat
        #[arg(long, value_name = "N", default_value_t = 0)]
        loop_bound: u16,
    },
    /// Check soundness, and optionally that paths are traces of the model
    Check {
        #[arg(value_name = "MODEL")]
        target: Option<PathBuf>,
        /// Paths artifact JSON to check against the model
        #[arg(long, value_name = "FILE")]
        paths: Option<PathBuf>,
        #[arg(long, value_name = "N", default_value_t = 1)]
        loop_bound: u16,
    },
    /// Run the pipeline and store every answer as a replay file in --replay-dir
    ReplayRecord {
        description: PathBuf,
        /// JSON object of canned answers per step; without it the live backend answers
        #[arg(long, value_name = "FILE")]
        script: Option<PathBuf>,
    },
    /// Serve the HTTP API over a directory of sessions (--session is the store root)
    Serve {
        #[arg(long, value_name = "ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Allowed browser origin; repeatable, none allows any
        #[arg(long, value_name = "ORIGIN")]
        cors_origin: Vec<String>,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum StepArg {
    Paths,
    Abstraction,
    Concurrency,
    Loops,
    Resolve,
}

impl From<StepArg> for Step {
    fn from(s: StepArg) -> Step {
        match s {
            StepArg::Paths => Step::Paths,
            StepArg::Abstraction => Step::Abstraction,
            StepArg::Concurrency => Step::Concurrency,
            StepArg::Loops => Step::Loops,
            StepArg::Resolve => Step::Resolve,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SlotArg {
    Description,
    Paths,
    Abstraction,
    Concurrency,
    Loops,
    Org,
    Alignment,
    Mdt,
    Model,
}

impl From<SlotArg> for SlotName {
    fn from(s: SlotArg) -> SlotName {
        format!("{s:?}").to_lowercase().parse().expect("slot names match")
    }
}

#[derive(Copy, Clone, Debug, PartialEq, ValueEnum)]
enum Format {
    Bpmn,
    Json,
}

struct Failure {
    family: ErrorFamily,
    code: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Failure {
        Failure {
            family: ErrorFamily::Usage,
            code: "usage",
            message: message.into(),
        }
    }

    fn validation(code: &'static str, message: impl Into<String>) -> Failure {
        Failure {
            family: ErrorFamily::Validation,
            code,
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.family {
            ErrorFamily::Usage => 2,
            ErrorFamily::Provider => 3,
            ErrorFamily::Pipeline => 4,
            ErrorFamily::Validation => 5,
            ErrorFamily::Store => 6,
        }
    }
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Failure {
        Failure {
            family: e.family(),
            code: e.code(),
            message: e.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error ({}): {}", self.family.as_str(), self.code, self.message)
    }
}

type Outcome<T> = Result<T, Failure>;

fn read_text(path: &Path) -> Outcome<String> {
    if path.as_os_str() == "-" {
        let mut s = String::new();
        std::io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| Failure::usage(format!("cannot read stdin: {e}")))?;
        return Ok(s);
    }
    std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))
}

impl Shared {
    fn provider(&self) -> Outcome<ProviderConfig> {
        let kind: ProviderKind = self
            .provider
            .as_deref()
            .unwrap_or("replay")
            .parse()
            .map_err(|e| Failure::usage(format!("{e}")))?;
        let config = ProviderConfig {
            provider_kind: kind,
            base_url: self.base_url.clone(),
            model_name: self.model.clone(),
            api_key_ref: (kind != ProviderKind::Replay).then(|| self.api_key_env.clone()),
            timeout_secs: self.timeout,
            max_retries: self.retries,
            replay_dir: self.replay_dir.clone(),
        };
        config.validate().map_err(|e| Failure::usage(e.to_string()))?;
        Ok(config)
    }

    fn session_dir(&self) -> Outcome<&Path> {
        self.session.as_deref().ok_or_else(|| Failure::usage("this command needs --session DIR"))
    }

    fn load(&self) -> Outcome<SessionState> {
        Ok(load_session_dir(self.session_dir()?)?)
    }

    fn save(&self, s: &SessionState) -> Outcome<()> {
        if let Some(dir) = &self.session {
            save_session_dir(s, dir)?;
        }
        Ok(())
    }

    /// Writes `text` to --out, or prints it.
    fn emit(&self, text: &str) -> Outcome<()> {
        match &self.out {
            Some(path) => std::fs::write(path, text)
                .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display()))),
            None => {
                stdout(text);
                Ok(())
            }
        }
    }

    fn report(&self, value: Value, human: impl FnOnce() -> String) {
        if self.json {
            stdout(&serde_json::to_string_pretty(&value).expect("json"));
        } else {
            let text = human();
            if !text.is_empty() {
                stdout(&text);
            }
        }
    }
}

/// Prints `text` with a final newline. A closed pipe (`| head`) is not an error.
fn stdout(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    if !text.ends_with('\n') {
        let _ = out.write_all(b"\n");
    }
}

fn steps_json(s: &SessionState) -> Value {
    json!(Step::ORDER.iter().map(|&st| s.step_info(st)).collect::<Vec<_>>())
}

fn steps_text(s: &SessionState) -> String {
    Step::ORDER
        .iter()
        .map(|&st| {
            let info = s.step_info(st);
            let status = serde_json::to_value(info.status).expect("status");
            let mut line = format!("{:<12} {}", st.as_str(), status.as_str().unwrap_or_default());
            if let Some(v) = info.version {
                line += &format!(" v{v}");
            }
            if !info.applicable {
                line += " (not needed)";
            }
            if let Some(e) = info.error {
                line += &format!(": {}", e.message);
            }
            line
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn model_summary(s: &SessionState) -> Value {
    match s.model_artifact(None) {
        Some(m) => json!({ "structure_hash": m.structure_hash, "warnings": m.warnings }),
        None => Value::Null,
    }
}

/// Creates a session and runs the whole pipeline with `model`, saving whatever
/// was reached even when a step fails.
fn pipeline(shared: &Shared, description: &Path, model: &dyn ChatModel, retries: u32) -> Outcome<SessionState> {
    if let Some(dir) = &shared.session {
        if dir.join("session.json").exists() {
            return Err(Failure::usage(format!("{} already holds a session", dir.display())));
        }
    }
    let mut s = create_session(&read_text(description)?)?;
    let outcome = run_pipeline(&mut s, model, retries);
    shared.save(&s)?;
    outcome?;
    Ok(s)
}

fn finish_run(shared: &Shared, s: &SessionState) -> Outcome<()> {
    let m = s
        .model_artifact(None)
        .ok_or_else(|| Failure::validation("no_model", "the pipeline ended without a model"))?;
    let xml = export_bpmn_xml(&m.model, &m.activities);
    if shared.out.is_some() || !shared.json {
        shared.emit(&xml)?;
    }
    if shared.json {
        let mut v = json!({ "session": s.id(), "steps": steps_json(s), "model": model_summary(s) });
        if let Some(out) = &shared.out {
            v["out"] = json!(out);
        }
        shared.report(v, String::new);
    } else {
        for w in &m.warnings {
            eprintln!("warning: {w}");
        }
    }
    Ok(())
}

/// The model named on the command line, or the session's current one.
fn load_model(shared: &Shared, path: Option<&Path>) -> Outcome<(ProcessModel, ActivityTable, Option<SessionState>)> {
    match path {
        Some(p) if p.is_dir() => {
            let s = load_session_dir(p)?;
            let m = s
                .model_artifact(None)
                .ok_or_else(|| Failure::usage("session has no model yet"))?
                .clone();
            Ok((m.model, m.activities, Some(s)))
        }
        Some(p) => {
            let xml = read_text(p)?;
            let (model, table) =
                import_bpmn_xml(&xml).map_err(|e| Failure::validation("invalid_bpmn", format!("{}: {e}", p.display())))?;
            Ok((model, table, None))
        }
        None => {
            let s = shared.load()?;
            let m = s
                .model_artifact(None)
                .ok_or_else(|| Failure::usage("session has no model yet"))?
                .clone();
            Ok((m.model, m.activities, Some(s)))
        }
    }
}

fn labels(table: &ActivityTable, trace: &[ActivityId]) -> Vec<String> {
    trace
        .iter()
        .map(|a| table.label(a).unwrap_or(a.as_str()).to_string())
        .collect()
}

fn dispatch(cli: Cli) -> Outcome<()> {
    let shared = &cli.shared;
    match cli.command {
        Command::Run { description } => {
            let config = shared.provider()?;
            let client = config.client().map_err(|e| Failure::usage(e.to_string()))?;
            let s = pipeline(shared, &description, client.as_ref(), config.max_retries)?;
            finish_run(shared, &s)
        }
        Command::ReplayRecord { description, script } => {
            let dir = shared
                .replay_dir
                .clone()
                .ok_or_else(|| Failure::usage("replay-record needs --replay-dir DIR"))?;
            std::fs::create_dir_all(&dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
            let (inner, retries): (Box<dyn ChatModel>, u32) = match script {
                Some(path) => {
                    let script: ScriptedModel = serde_json::from_str(&read_text(&path)?)
                        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
                    (Box::new(script), 0)
                }
                None => {
                    let config = shared.provider()?;
                    if !config.is_live() {
                        return Err(Failure::usage("replay-record needs --script or a live --provider"));
                    }
                    (config.client().map_err(|e| Failure::usage(e.to_string()))?, config.max_retries)
                }
            };
            let rec = Recording { inner: inner.as_ref(), dir };
            let s = pipeline(shared, &description, &rec, retries)?;
            finish_run(shared, &s)
        }
        Command::Step { step } => {
            let step: Step = step.into();
            let config = shared.provider()?;
            let mut s = shared.load()?;
            let outcome = run_step(&mut s, step, &config);
            shared.save(&s)?;
            outcome?;
            let slot = step.slot();
            let artifact = s
                .current(slot)
                .map(|v| serde_json::from_str::<Value>(&export_artifact_json(&v.value)).expect("artifact json"));
            shared.report(
                json!({ "step": s.step_info(step), "artifact": artifact, "steps": steps_json(&s), "model": model_summary(&s) }),
                || steps_text(&s),
            );
            Ok(())
        }
        Command::Override { slot, file } => {
            let slot: SlotName = slot.into();
            let mut s = shared.load()?;
            let version = s.override_json(slot, &read_text(&file)?)?;
            shared.save(&s)?;
            shared.report(json!({ "slot": slot, "version": version, "steps": steps_json(&s) }), || {
                format!("{slot} v{version} stored\n{}", steps_text(&s))
            });
            Ok(())
        }
        Command::Export { format, version, slot } => {
            let s = shared.load()?;
            let slot: SlotName = slot.map(Into::into).unwrap_or(SlotName::Model);
            let v = match version {
                Some(k) => s.version(slot, k),
                None => s.current(slot),
            }
            .ok_or_else(|| Failure::usage(format!("session has no such {slot} version")))?;
            match (&v.value, format) {
                (Artifact::Model(m), Format::Bpmn) => shared.emit(&export_bpmn_xml(&m.model, &m.activities)),
                (value, _) => shared.emit(&(export_artifact_json(value) + "\n")),
            }
        }
        Command::Traces { target, loop_bound } => {
            let (model, table, _) = load_model(shared, target.as_deref())?;
            let traces = enumerate_traces(&model, loop_bound).map_err(|e| Failure::validation("state_explosion", e.to_string()))?;
            let named: Vec<Vec<String>> = traces.iter().map(|t| labels(&table, t)).collect();
            if shared.json {
                let v = json!({ "loop_bound": loop_bound, "count": named.len(), "traces": named });
                shared.emit(&serde_json::to_string_pretty(&v).expect("json"))
            } else {
                let text: Vec<String> = named.iter().map(|t| t.join(" -> ")).collect();
                shared.emit(&text.join("\n"))
            }
        }
        Command::Check { target, paths, loop_bound } => {
            let (model, table, session) = load_model(shared, target.as_deref())?;
            let sound = check_soundness(&model).map_err(|e| Failure::validation("state_explosion", e.to_string()))?;
            let block = is_block_structured(&model);
            let checked: Option<Vec<ExecutionPath>> = match (paths, &session) {
                (Some(file), _) => {
                    let Artifact::Paths(p) = import_artifact_json(SlotName::Paths, &read_text(&file)?)
                        .map_err(|e| Failure::validation("schema_violation", e.to_string()))?
                    else {
                        unreachable!("paths slot")
                    };
                    let mut out = Vec::new();
                    for path in p.paths {
                        let ids = path
                            .iter()
                            .map(|l| {
                                table
                                    .id_of(l)
                                    .cloned()
                                    .ok_or_else(|| Failure::validation("unknown_label", format!("`{l}` is not a task of the model")))
                            })
                            .collect::<Outcome<Vec<_>>>()?;
                        out.push(ExecutionPath::new(ids).map_err(|e| Failure::validation("schema_violation", e.to_string()))?);
                    }
                    Some(out)
                }
                (None, Some(s)) => Some(s.effective_paths()?.paths),
                (None, None) => None,
            };
            let conformance = match &checked {
                Some(p) => Some(conforms(p, &model, loop_bound).map_err(|e| Failure::validation("state_explosion", e.to_string()))?),
                None => None,
            };
            let fits = conformance.as_ref().is_none_or(|c| c.conforms);
            let counter: Vec<Vec<String>> = conformance
                .iter()
                .flat_map(|c| c.counterexamples.iter().map(|p| labels(&table, p.steps())))
                .collect();
            shared.report(
                json!({
                    "sound": sound.is_sound(),
                    "soundness": sound,
                    "block_structured": block,
                    "conforms": conformance.as_ref().map(|c| c.conforms),
                    "counterexamples": counter,
                }),
                || {
                    let mut lines = vec![
                        format!("sound: {}", if sound.is_sound() { "yes" } else { "no" }),
                        format!("block structured: {}", if block { "yes" } else { "no" }),
                    ];
                    if let Some(c) = &conformance {
                        lines.push(format!("paths conform (loop bound {loop_bound}): {}", if c.conforms { "yes" } else { "no" }));
                        lines.extend(counter.iter().map(|p| format!("  not a trace: {}", p.join(" -> "))));
                    }
                    lines.join("\n")
                },
            );
            if !sound.is_sound() {
                return Err(Failure::validation("unsound", "model is not sound"));
            }
            if !fits {
                return Err(Failure::validation("nonconforming", format!("{} path(s) are not traces of the model", counter.len())));
            }
            Ok(())
        }
        Command::Serve { addr, cors_origin } => {
            let config = pragmos_api::ApiConfig {
                store: shared.session.clone().unwrap_or_else(|| PathBuf::from("sessions")),
                provider: shared.provider()?,
                cors_origins: cors_origin,
            };
            let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::usage(e.to_string()))?;
            eprintln!("serving {} on http://{addr}", config.store.display());
            rt.block_on(pragmos_api::serve(addr, config)).map_err(|e| Failure::usage(e.to_string()))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let json = cli.shared.json;
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if json {
                let v = json!({ "error": { "family": f.family.as_str(), "code": f.code, "detail": f.message } });
                eprintln!("{v}");
            } else {
                eprintln!("{f}");
            }
            ExitCode::from(f.exit_code())
        }
    }
}
