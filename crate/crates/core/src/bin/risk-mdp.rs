fn main() {
    std::process::exit(risk_mdp::cli::run_cli(std::env::args_os()));
}
