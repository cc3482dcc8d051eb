use std::io::{self, Write};

use infohub_gateway::cli::{run, Io};
use infohub_gateway::config::CONFIG_ENV;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let env_config = std::env::var(CONFIG_ENV).ok();
    let stdin = io::stdin();
    let mut stdin = stdin.lock();
    let mut stdout = io::stdout();
    let mut stderr = io::stderr();
    let code =
        run(&args, env_config.as_deref(), &mut Io { stdin: &mut stdin, stdout: &mut stdout, stderr: &mut stderr });
    let _ = stdout.flush();
    std::process::exit(code);
}
