fn main() {
    std::process::exit(seqgrad::cli::run(std::env::args_os()));
}
