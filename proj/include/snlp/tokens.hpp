#pragma once

#include <cstdint>
#include <vector>

namespace snlp {

// n independent uniform draws over the vocabulary.
std::vector<int> uniform_token_stream(int n, int vocab_size, std::uint64_t seed);

// Order-1 Markov chain with a seeded random transition table: every state
// puts most of its mass on a few preferred successors, so the stream has
// structure that different readout depths score differently, unlike the
// uniform source.
std::vector<int> markov_token_stream(int n, int vocab_size, std::uint64_t seed);

}  // namespace snlp
