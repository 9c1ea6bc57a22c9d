fn main() {
    std::process::exit(metapatch::cli::run(std::env::args_os()));
}
