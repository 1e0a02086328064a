fn main() {
    std::process::exit(semhash_cli::run(std::env::args_os()));
}
