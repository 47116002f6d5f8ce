use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = hpcmon_cli::Cli::parse();
    if let Err(e) = hpcmon_cli::run(cli) {
        eprintln!("hpcmon: {e:#}");
        std::process::exit(hpcmon_cli::exit_code(&e));
    }
}
