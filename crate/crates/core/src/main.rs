fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let code = rsp_core::cli::run_cli(&argv, &mut std::io::stdout());
    std::process::exit(code);
}
