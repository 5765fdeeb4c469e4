fn main() {
    std::process::exit(tsfm_peft_cli::run(std::env::args_os()));
}
