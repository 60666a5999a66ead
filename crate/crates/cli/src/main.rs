fn main() {
    let mut stdout = std::io::stdout();
    if let Err(e) = crfgan_cli::main_with(std::env::args_os(), &mut stdout) {
        eprintln!("{}", e.to_line());
        std::process::exit(e.kind.exit_code());
    }
}
