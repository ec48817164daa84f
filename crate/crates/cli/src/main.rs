fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<_> = std::env::args_os().collect();
    std::process::exit(cadgcn_cli::run_command(&argv));
}
