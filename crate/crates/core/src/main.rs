fn main() -> anyhow::Result<()> {
    gpcd::cli::run(std::env::args_os())
}
