fn main() {
    std::process::exit(clusterfusion::cli::main(std::env::args_os()));
}
