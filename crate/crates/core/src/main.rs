use clap::Parser;
use loraplace::cli::{dispatch, error_line, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("{}", error_line(&e));
        std::process::exit(1);
    }
}
