fn main() {
    std::process::exit(hyperfed::cli_main());
}
