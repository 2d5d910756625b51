use clap::Parser;
use mode_cli::args::Cli;

fn main() {
    let cli = Cli::parse();
    let result = cli.command.to_spec().and_then(mode_cli::run);
    match result {
        Ok(out) => {
            print!("{}", out.report.render());
            println!("wrote {}", out.dir.display());
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
