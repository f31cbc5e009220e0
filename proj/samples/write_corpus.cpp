// Writes a small synthetic word-level probing corpus and a matching
// word-vector file, the inputs used by samples/config.json.
//
//   write_corpus OUT_DIR [SEED]

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "evprobe/dataset.hpp"
#include "evprobe/representations.hpp"
#include "evprobe/synthetic.hpp"

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: " << argv[0] << " OUT_DIR [SEED]\n";
    return 2;
  }
  const std::filesystem::path dir = argv[1];
  const std::uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 7;
  std::filesystem::create_directories(dir);

  // 150 word types in 3 classes, 16-dimensional vectors.
  const auto corpus = evprobe::synthetic::make_corpus(seed, 150, 3, 16);
  evprobe::save_dataset(corpus.dataset, (dir / "corpus.jsonl").string());
  std::ofstream vec(dir / "vectors.txt");
  evprobe::write_embedding_table(vec, corpus.embeddings);

  std::cout << corpus.dataset.size() << " examples, " << corpus.embeddings.vectors.size() << " word vectors -> "
            << dir.string() << '\n';
  return 0;
}
