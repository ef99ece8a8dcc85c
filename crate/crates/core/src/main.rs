fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(ppmlhdfe::cli::main_with_args(argv));
}
