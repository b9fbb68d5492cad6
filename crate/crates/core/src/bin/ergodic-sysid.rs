fn main() {
    std::process::exit(ergodic_sysid::cli::run(std::env::args_os()));
}
