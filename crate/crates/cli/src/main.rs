fn main() {
    std::process::exit(ttasv_cli::cli::main_entry());
}
