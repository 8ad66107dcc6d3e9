use clap::Parser;

fn main() {
    let cli = loco::cli::Cli::parse();
    match loco::cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
