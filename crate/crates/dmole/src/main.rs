fn main() {
    std::process::exit(dmole::cli::main_with(std::env::args_os()));
}
