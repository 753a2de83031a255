use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = bialign::cli::Cli::parse();
    if let Err(e) = bialign::cli::run(cli) {
        eprintln!("bialign: {e}");
        std::process::exit(1);
    }
}
