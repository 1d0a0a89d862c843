fn main() {
    std::process::exit(cryomap::cli::run(std::env::args_os()));
}
