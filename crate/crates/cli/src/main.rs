fn main() {
    std::process::exit(conststyle::run(std::env::args_os()));
}
