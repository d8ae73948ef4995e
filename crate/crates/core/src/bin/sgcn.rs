fn main() {
    std::process::exit(sgcn::cli::run(std::env::args_os()));
}
