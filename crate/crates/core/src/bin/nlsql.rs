use std::io::{self, Write};
use std::path::PathBuf;
use std::process;

use clap::{Parser, Subcommand};
use nlsql::app::{cmd_eval, cmd_index, cmd_query, cmd_repl, load_config, App, AppError, ExitCode, FALLBACK_TOKEN_ENV};

#[derive(Parser)]
#[command(name = "nlsql", version, about = "Answer questions over SQLite databases in natural language")]
struct Cli {
    /// Config file (default: $NLSQL_CONFIG, then ./nlsql.toml)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the databases root
    #[arg(long, global = true)]
    databases_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed the documentation of a database and write its cache
    Index { db_id: String },
    /// Answer one question
    Query {
        db_id: String,
        question: String,
        #[arg(long)]
        json: bool,
        /// Reject queries whose semantic checks raise warnings
        #[arg(long)]
        strict_semantic: bool,
    },
    /// Run a BIRD-format benchmark file
    Eval {
        tasks: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value = "nlsql-report")]
        out: PathBuf,
    },
    /// Interactive session against one database
    Repl { db_id: String },
}

fn run(cli: Cli) -> Result<ExitCode, AppError> {
    let mut config = load_config(cli.config.as_deref(), |k| std::env::var(k).ok())?;
    if let Some(root) = cli.databases_root {
        config.databases_root = root;
    }
    if let Command::Query { strict_semantic: true, .. } = cli.command {
        config.strict_semantic = true;
    }
    let token = std::env::var(FALLBACK_TOKEN_ENV).ok();
    let app = App::new(config, token.as_deref())?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let code = match cli.command {
        Command::Index { db_id } => cmd_index(&app, &db_id, &mut out),
        Command::Query { db_id, question, json, .. } => cmd_query(&app, &db_id, &question, json, &mut out),
        Command::Eval { tasks, workers, out: dir } => cmd_eval(&app, &tasks, workers, &dir, &mut out),
        Command::Repl { db_id } => cmd_repl(&app, &db_id, &mut io::stdin().lock(), &mut out),
    };
    out.flush()?;
    code
}

fn main() {
    env_logger::init();
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("nlsql: {e}");
            e.exit_code()
        }
    };
    process::exit(code as i32);
}
