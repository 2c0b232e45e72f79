use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = dcmamber_cli::Cli::parse();
    if let Err(e) = dcmamber_cli::configure_threads().and_then(|()| dcmamber_cli::run(cli)) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
