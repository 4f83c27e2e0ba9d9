fn main() {
    flowgate::node::cli_main();
}
