fn main() {
    std::process::exit(prg_distill::cli::run(std::env::args_os()));
}
