// Generates the bundled toy corpus: deterministic templated prose with a
// small vocabulary, organized into blank-line separated paragraphs. Byte-level
// models learn its spelling and local syntax quickly, which keeps the
// end-to-end training pipeline inside a desk-scale budget.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "echoatt/rng.hpp"

using echoatt::Rng;

namespace {

const std::vector<std::string> kSubjects = {
    "the river", "the mill", "a lantern", "the harbor", "an old map", "the engine", "a small boat", "the garden",
    "the tower",  "a letter",  "the bridge", "the orchard", "a traveler", "the clock", "the market", "a signal",
};

const std::vector<std::string> kVerbs = {
    "turns", "waits", "carries", "follows", "answers", "holds", "crosses", "measures",
    "keeps",  "finds", "repairs", "signals", "guides",  "moves", "reaches", "remembers",
};

const std::vector<std::string> kObjects = {
    "the northern road", "a quiet field",   "the open water", "its own shadow", "the first light",
    "a steady rhythm",   "the narrow path", "the far shore",  "a simple answer", "the winter store",
    "the evening bell",  "a careful record", "the deep channel", "the long season",
};

const std::vector<std::string> kClauses = {
    "before the rain begins", "while the town sleeps",  "after the tide returns", "when the wind settles",
    "as the day closes",      "until the frost breaks", "once the gate opens",    "though the fog lingers",
};

const std::vector<std::string> kNumbers = {"two", "three", "four", "five", "six", "seven", "eight", "nine"};

std::string sentence(Rng& rng) {
    auto pick = [&rng](const std::vector<std::string>& v) -> const std::string& {
        return v[static_cast<size_t>(rng.next_below(v.size()))];
    };
    switch (rng.next_below(5)) {
        case 0:
            return pick(kSubjects) + " " + pick(kVerbs) + " " + pick(kObjects) + ".";
        case 1:
            return pick(kSubjects) + " " + pick(kVerbs) + " " + pick(kObjects) + " " + pick(kClauses) + ".";
        case 2:
            return "for " + pick(kNumbers) + " days " + pick(kSubjects) + " " + pick(kVerbs) + " " +
                   pick(kObjects) + ".";
        case 3:
            return pick(kClauses) + ", " + pick(kSubjects) + " " + pick(kVerbs) + " " + pick(kObjects) + ".";
        default: {
            int a = 2 + static_cast<int>(rng.next_below(7));
            int b = 2 + static_cast<int>(rng.next_below(7));
            return "the ledger shows " + std::to_string(a) + " plus " + std::to_string(b) + " makes " +
                   std::to_string(a + b) + ".";
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: %s <output.txt> [target_bytes] [seed]\n", argv[0]);
        return 1;
    }
    std::string out_path = argv[1];
    size_t target = argc > 2 ? static_cast<size_t>(std::atoll(argv[2])) : 1200000;
    uint64_t seed = argc > 3 ? static_cast<uint64_t>(std::atoll(argv[3])) : 7;

    Rng rng = Rng::from_label(seed, "corpus/gen");
    std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
    if (!out) {
        std::fprintf(stderr, "cannot open %s\n", out_path.c_str());
        return 1;
    }
    size_t written = 0;
    while (written < target) {
        int sentences = 4 + static_cast<int>(rng.next_below(5));
        std::string para;
        for (int i = 0; i < sentences; ++i) {
            if (i) para += " ";
            para += sentence(rng);
        }
        para += "\n\n";
        out << para;
        written += para.size();
    }
    std::fprintf(stderr, "wrote %zu bytes to %s\n", written, out_path.c_str());
    return 0;
}
