// qgpt-corpus: writes the seeded synthetic English corpus used by the tests.

#include <CLI11.hpp>

#include <iostream>

#include "qgpt/io/binary.hpp"
#include "qgpt/train/synthetic.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Write a seeded synthetic English-like corpus"};
    std::size_t bytes = 1 << 20;
    std::uint64_t seed = 0;
    std::string out;
    app.add_option("--bytes", bytes, "corpus size in bytes")->capture_default_str();
    app.add_option("--seed", seed, "generator seed")->capture_default_str();
    app.add_option("--out", out, "output file")->required();
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    try {
        const auto text = qgpt::train::synthetic_corpus(bytes, seed);
        qgpt::io::write_bytes(out, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
