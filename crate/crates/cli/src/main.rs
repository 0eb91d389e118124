use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TIMEMOE_LOG", "warn")).init();
    let cli = timemoe_cli::Cli::parse();
    if let Err(e) = timemoe_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
