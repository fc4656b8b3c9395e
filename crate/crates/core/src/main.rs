fn main() {
    env_logger::Builder::new().filter_level(log::LevelFilter::Warn).init();
    std::process::exit(fsl_engage::cli::run_command(std::env::args_os()));
}
