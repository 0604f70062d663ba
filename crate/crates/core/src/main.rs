fn main() {
    let seed = std::env::var("CLFA_SEED").ok();
    std::process::exit(camadapt::cli::main_with(std::env::args_os(), seed.as_deref()));
}
