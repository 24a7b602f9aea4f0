use clap::Parser;

fn main() {
    let cli = texnet_cli::Cli::parse();
    if let Err(err) = texnet_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(texnet_cli::exit_code(&err));
    }
}
