use clap::Parser;

fn main() {
    let cli = contlab::cli::Cli::parse();
    match contlab::cli::run(cli) {
        Ok(msg) => print!("{msg}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
