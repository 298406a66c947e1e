fn main() {
    std::process::exit(avt::cli::main_entry());
}
