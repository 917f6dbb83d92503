use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = esplab_cli::Cli::parse();
    match esplab_cli::run(&cli) {
        Ok(path) => println!("{}", path.display()),
        Err(e) => {
            eprintln!("esplab {}: {e}", cli.command.name());
            std::process::exit(e.exit_code());
        }
    }
}
