//! `mmag` — operator and demo surface for the memory framework.
//!
//! Exit codes: 0 success, 1 user error (bad flags, invalid config or
//! input), 2 internal error (storage, crypto, backend).

mod config;

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mmag_core::backend::to_chat_messages;
use mmag_core::controller::{Policy, PolicyName};
use mmag_core::error::MemoryError;
use mmag_core::eval::{generate_corpus, run_suite_on, EvalConfig};
use mmag_core::longterm::{BioSource, Consent, EraseSelector};
use mmag_core::model::{Message, Role, TokenBudget};

use config::CliConfig;

#[derive(Parser)]
#[command(name = "mmag", version, about = "Layered memory for conversational agents")]
struct Cli {
    /// Path to a TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Interactive chat REPL against the configured backend.
    Chat(ChatArgs),
    /// Replay a JSONL transcript through the stack, printing responses.
    Replay(ReplayArgs),
    /// Inspect, edit, or forget a user's long-term memory.
    Memory {
        #[command(subcommand)]
        action: MemoryAction,
    },
    /// Manage scheduled events.
    Events {
        #[command(subcommand)]
        action: EventsAction,
    },
    /// Show detected routines.
    Routines {
        #[command(subcommand)]
        action: RoutinesAction,
    },
    /// Run the evaluation harness.
    Eval {
        #[command(subcommand)]
        action: EvalAction,
    },
    /// Validate and print the resolved configuration.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Args)]
struct ChatArgs {
    #[arg(long)]
    user: String,
    #[arg(long)]
    session: String,
    /// Print the decision trace after each response.
    #[arg(long)]
    explain: bool,
    /// Override the configured policy for this chat.
    #[arg(long)]
    policy: Option<String>,
}

#[derive(Args)]
struct ReplayArgs {
    /// JSONL transcript: one message per line with id, session_id, role,
    /// ts_ms, content.
    transcript: PathBuf,
    #[arg(long)]
    user: String,
    #[arg(long)]
    explain: bool,
}

#[derive(Subcommand)]
enum MemoryAction {
    /// Full decrypted listing: bio, traits (revoked included), audit trail.
    Inspect {
        #[arg(long)]
        user: String,
    },
    /// Upsert the bio or a trait.
    Edit {
        #[arg(long)]
        user: String,
        /// Replace the bio text.
        #[arg(long)]
        bio: Option<String>,
        /// Upsert a trait as key=value.
        #[arg(long, value_name = "KEY=VALUE")]
        r#trait: Option<String>,
        /// Store the trait with consent revoked (hidden from prompts).
        #[arg(long)]
        revoked: bool,
    },
    /// Crypto-shred memory: everything, just the bio, or one trait.
    Forget {
        #[arg(long)]
        user: String,
        #[arg(long, conflicts_with_all = ["bio", "trait_key"])]
        all: bool,
        #[arg(long, conflicts_with = "trait_key")]
        bio: bool,
        #[arg(long = "trait", value_name = "KEY")]
        trait_key: Option<String>,
    },
}

#[derive(Subcommand)]
enum EventsAction {
    /// Schedule a future event.
    Add {
        #[arg(long)]
        user: String,
        /// Absolute ms timestamp, or relative like +30s, +15m, +2h, +1d.
        #[arg(long)]
        at: String,
        #[arg(long)]
        payload: String,
    },
    /// List events with their status.
    List {
        #[arg(long)]
        user: String,
    },
}

#[derive(Subcommand)]
enum RoutinesAction {
    /// Detect and print routine cues.
    Show {
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 28)]
        window_days: u32,
        #[arg(long, default_value_t = 3)]
        min_support: usize,
    },
}

#[derive(Subcommand)]
enum EvalAction {
    /// Generate a corpus from the seed and replay it through the stack.
    Run {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        sessions: usize,
        #[arg(long, default_value_t = 8)]
        facts: usize,
        #[arg(long, default_value_t = 0)]
        erasures: usize,
        #[arg(long, default_value_t = 0)]
        events: usize,
        /// Override the budget total.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        policy: Option<String>,
        /// Dump every assembled prompt into this directory.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
        /// Print the full report as JSON (includes latency).
        #[arg(long)]
        json: bool,
        /// Print the stable JSON form (latency zeroed), for diffing runs.
        #[arg(long)]
        stable: bool,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Validate the config file and print the resolved settings.
    Check,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; help/version exit cleanly.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(exit_code(&e));
        }
    }
}

/// 1 for user-recoverable problems, 2 for internal failures.
fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(mem) = cause.downcast_ref::<MemoryError>() {
            return match mem {
                MemoryError::InvalidInput(_)
                | MemoryError::InvalidMessage(_)
                | MemoryError::UnknownKek(_)
                | MemoryError::Keyring(_)
                | MemoryError::NotFound { .. } => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let config = CliConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Chat(args) => chat(&config, args),
        Command::Replay(args) => replay(&config, args),
        Command::Memory { action } => memory(&config, action),
        Command::Events { action } => events(&config, action),
        Command::Routines { action } => routines(&config, action),
        Command::Eval { action } => eval(&config, action),
        Command::Config { action } => match action {
            ConfigAction::Check => config_check(&config),
        },
    }
}

fn policy_from(config: &CliConfig, flag: Option<&str>) -> Result<Policy> {
    match flag {
        Some(name) => {
            let name =
                PolicyName::parse(name).ok_or_else(|| anyhow!("unknown policy {name:?}"))?;
            Ok(Policy::preset(name))
        }
        None => config.policy(),
    }
}

// ---------------------------------------------------------------------------
// chat
// ---------------------------------------------------------------------------

fn chat(config: &CliConfig, args: ChatArgs) -> Result<()> {
    let controller = Arc::new(config.build_controller()?);
    let backend = config.generation_backend()?;
    let policy = policy_from(config, args.policy.as_deref())?;
    let budget = config.budget()?;

    // Background proactive ticker, chat-only.
    let stop = Arc::new(AtomicBool::new(false));
    let ticker = {
        let controller = controller.clone();
        let user = args.user.clone();
        let stop = stop.clone();
        std::thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                let now = controller.clock().now_ms();
                let _ = controller.proactive_tick(&user, now);
                std::thread::sleep(std::time::Duration::from_millis(1000));
            }
        })
    };

    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    eprintln!("mmag chat — {} backend, :q to quit", backend.name());
    for line in stdin.lock().lines() {
        let line = line?;
        let query = line.trim();
        if query.is_empty() {
            continue;
        }
        if query == ":q" || query == ":quit" {
            break;
        }
        let now = controller.clock().now_ms();
        let assembly = match controller.assemble_prompt(
            &args.user,
            &args.session,
            query,
            now,
            &policy,
            &budget,
        ) {
            Ok(a) => a,
            Err(e @ MemoryError::InvalidMessage(_)) => {
                eprintln!("skipped: {e}");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let response = backend.generate(&to_chat_messages(&assembly), 0)?;
        writeln!(out, "{response}")?;
        if args.explain {
            writeln!(out, "--- trace ---")?;
            writeln!(out, "{}", serde_json::to_string_pretty(&assembly.trace)?)?;
        }
        controller
            .conv
            .remember(Message::new(&args.session, Role::User, query, now))?;
        controller.conv.remember(Message::new(
            &args.session,
            Role::Assistant,
            &response,
            now + 1,
        ))?;
    }
    stop.store(true, Ordering::SeqCst);
    let _ = ticker.join();
    // Session over: working memory is discardable by contract.
    controller.working.clear_session(&args.session);
    Ok(())
}

// ---------------------------------------------------------------------------
// replay
// ---------------------------------------------------------------------------

fn replay(config: &CliConfig, args: ReplayArgs) -> Result<()> {
    let controller = config.build_controller()?;
    let backend = config.generation_backend()?;
    let policy = config.policy()?;
    let budget = config.budget()?;

    let raw = std::fs::read_to_string(&args.transcript)
        .with_context(|| format!("reading {}", args.transcript.display()))?;
    let mut out = std::io::stdout().lock();
    let mut replayed = 0usize;
    for (line_no, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let message = Message::from_jsonl(line)
            .with_context(|| format!("transcript line {}", line_no + 1))?;
        match message.role {
            Role::User => {
                // The transcript's timestamps drive the clock.
                let now = message.ts_ms;
                controller.proactive_tick(&args.user, now)?;
                let assembly = controller.assemble_prompt(
                    &args.user,
                    &message.session_id,
                    &message.content,
                    now,
                    &policy,
                    &budget,
                )?;
                let response = backend.generate(&to_chat_messages(&assembly), 0)?;
                writeln!(out, "> {}", message.content)?;
                if args.explain {
                    write!(out, "{}", assembly.rendered())?;
                }
                writeln!(out, "< {response}")?;
                let session = message.session_id.clone();
                controller.conv.remember(message)?;
                controller.conv.remember(Message::new(
                    &session,
                    Role::Assistant,
                    &response,
                    now + 1,
                ))?;
                replayed += 1;
            }
            Role::Assistant | Role::System => {
                controller.conv.remember(message)?;
            }
        }
    }
    writeln!(out, "replayed {replayed} user turns")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// memory
// ---------------------------------------------------------------------------

fn memory(config: &CliConfig, action: MemoryAction) -> Result<()> {
    let controller = config.build_controller()?;
    let longterm = &controller.longterm;
    match action {
        MemoryAction::Inspect { user } => {
            let inspection = longterm.inspect(&user)?;
            println!("{}", serde_json::to_string_pretty(&inspection)?);
        }
        MemoryAction::Edit {
            user,
            bio,
            r#trait,
            revoked,
        } => {
            if bio.is_none() && r#trait.is_none() {
                bail!("nothing to edit: pass --bio and/or --trait key=value");
            }
            if let Some(text) = bio {
                let updated = longterm.upsert_bio(&user, &text, BioSource::UserStated)?;
                println!("bio updated to version {}", updated.version);
            }
            if let Some(pair) = r#trait {
                let (key, value) = pair
                    .split_once('=')
                    .ok_or_else(|| anyhow!("--trait expects key=value, got {pair:?}"))?;
                let consent = if revoked {
                    Consent::Revoked
                } else {
                    Consent::Granted
                };
                longterm.set_trait(&user, key, value, consent)?;
                println!(
                    "trait {key} set ({})",
                    if revoked { "revoked" } else { "granted" }
                );
            }
        }
        MemoryAction::Forget {
            user,
            all,
            bio,
            trait_key,
        } => {
            let selector = if all {
                EraseSelector::All
            } else if bio {
                EraseSelector::Bio
            } else if let Some(key) = trait_key {
                EraseSelector::Trait(key)
            } else {
                bail!("pass one of --all, --bio, --trait KEY");
            };
            let report = longterm.forget(&user, &selector)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// events / routines
// ---------------------------------------------------------------------------

fn parse_at(spec: &str, now_ms: i64) -> Result<i64> {
    if let Some(rest) = spec.strip_prefix('+') {
        let (digits, unit) = rest.split_at(rest.len().saturating_sub(1));
        let n: i64 = digits
            .parse()
            .with_context(|| format!("bad relative time {spec:?}"))?;
        let ms = match unit {
            "s" => n * 1_000,
            "m" => n * 60_000,
            "h" => n * 3_600_000,
            "d" => n * 86_400_000,
            _ => bail!("relative time needs a unit s/m/h/d: {spec:?}"),
        };
        Ok(now_ms + ms)
    } else {
        spec.parse()
            .with_context(|| format!("bad absolute ms timestamp {spec:?}"))
    }
}

fn events(config: &CliConfig, action: EventsAction) -> Result<()> {
    let controller = config.build_controller()?;
    match action {
        EventsAction::Add { user, at, payload } => {
            let now = controller.clock().now_ms();
            let fire_at = parse_at(&at, now)?;
            let event = controller.episodic.add_event(&user, fire_at, &payload)?;
            println!("{}", serde_json::to_string_pretty(&event)?);
        }
        EventsAction::List { user } => {
            let events = controller.episodic.list_events(&user)?;
            println!("{}", serde_json::to_string_pretty(&events)?);
        }
    }
    Ok(())
}

fn routines(config: &CliConfig, action: RoutinesAction) -> Result<()> {
    let controller = config.build_controller()?;
    match action {
        RoutinesAction::Show {
            user,
            window_days,
            min_support,
        } => {
            let now = controller.clock().now_ms();
            let cues = controller
                .episodic
                .detect_routines(&user, now, window_days, min_support)?;
            println!("{}", serde_json::to_string_pretty(&cues)?);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / config
// ---------------------------------------------------------------------------

fn eval(config: &CliConfig, action: EvalAction) -> Result<()> {
    match action {
        EvalAction::Run {
            seed,
            sessions,
            facts,
            erasures,
            events,
            budget,
            policy,
            trace_dir,
            json,
            stable,
        } => {
            let corpus = generate_corpus(seed, sessions, facts, erasures, events)?;
            let eval_config = EvalConfig {
                budget: match budget {
                    Some(total) => TokenBudget::with_total(total),
                    None => config.budget()?,
                },
                policy: policy_from(config, policy.as_deref())?,
                trace_dir,
                file_store: None,
            };
            let backend = config.generation_backend()?;
            let run = run_suite_on(&corpus, &eval_config, backend.as_ref())?;
            if stable {
                println!("{}", run.report.stable_json());
            } else if json {
                println!("{}", serde_json::to_string_pretty(&run.report)?);
            } else {
                print!("{}", run.report.to_table());
            }
            Ok(())
        }
    }
}

fn config_check(config: &CliConfig) -> Result<()> {
    let policy = config.policy()?;
    let budget = config.budget()?;
    // Backend construction validates the selection without calling out.
    let backend = config.generation_backend()?;
    let resolved = serde_json::json!({
        "store_dir": config.store_dir,
        "keyring_path": config.keyring_path(),
        "backend": backend.name(),
        "policy": policy.name,
        "budget_total": budget.total,
        "fractions": budget.per_layer_fractions,
        "static_providers": config.providers.keys().collect::<Vec<_>>(),
        "http_providers": config.provider_urls.keys().collect::<Vec<_>>(),
        "fake_now_ms": config.fake_now_ms,
    });
    println!("{}", serde_json::to_string_pretty(&resolved)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_and_absolute_event_times() {
        assert_eq!(parse_at("+30s", 1_000).unwrap(), 31_000);
        assert_eq!(parse_at("+15m", 0).unwrap(), 900_000);
        assert_eq!(parse_at("+2h", 0).unwrap(), 7_200_000);
        assert_eq!(parse_at("123456", 0).unwrap(), 123_456);
        assert!(parse_at("+5x", 0).is_err());
        assert!(parse_at("soon", 0).is_err());
    }
}
