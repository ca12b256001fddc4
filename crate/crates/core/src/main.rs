fn main() {
    std::process::exit(tempo_prune::cli::run_cli(std::env::args_os()));
}
