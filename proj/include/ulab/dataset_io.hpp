#pragma once

// Line-delimited dataset files: one manifest record followed by one record
// per QA item. Reading back a written dataset reproduces it exactly.

#include <filesystem>
#include <string>

#include "ulab/worldgen.hpp"

namespace ulab::world {

void write_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

// token -> id table as a standalone artifact
void write_vocab(const Vocab& vocab, const std::filesystem::path& path);

}  // namespace ulab::world
