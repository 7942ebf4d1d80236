use clap::Parser;
use loopsift::cli::{self, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = cli::run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.class().exit_code());
    }
}
