fn main() {
    std::process::exit(hgs_workbench::cli::main_with(std::env::args_os()));
}
