use qbsde::cli;

fn main() {
    if let Err(e) = cli::init_workers() {
        eprintln!("error: {e}");
        std::process::exit(cli::exit_code(&e));
    }
    std::process::exit(cli::main_with(std::env::args_os()));
}
