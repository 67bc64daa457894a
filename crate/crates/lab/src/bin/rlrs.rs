fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RLRS_LOG", "warn")).init();
    std::process::exit(rlrs_lab::cli::main_with(std::env::args_os()));
}
