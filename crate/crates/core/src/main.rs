fn main() {
    std::process::exit(isolexec::cli::main());
}
