use clap::Parser;
use inrgan_cli::{error_line, run, Cli, ExitKind};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{}", error_line(&e));
        std::process::exit(ExitKind::of(&e) as i32);
    }
}
