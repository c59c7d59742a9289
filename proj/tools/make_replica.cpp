// Writes the synthetic election-shaped replica (clean and with a planted
// dissimilar neighbour pair) as CSV + schema JSON.
//
//   make_replica OUTDIR [SEED]

#include <filesystem>
#include <iostream>
#include <string>

#include "netoutlier.hpp"

namespace fs = std::filesystem;
using namespace netoutlier;

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: make_replica OUTDIR [SEED]\n";
    return 2;
  }
  const std::uint64_t seed = argc > 2 ? std::stoull(argv[2]) : 2015;
  try {
    for (bool planted : {false, true}) {
      const ElectionReplica rep = make_election_replica(seed, planted);
      const fs::path dir = fs::path(argv[1]) / (planted ? "planted" : "clean");
      fs::create_directories(dir);
      io::write_matrix((dir / "responses.csv").string(), rep.response_names, rep.X);
      io::write_matrix((dir / "covariates.csv").string(), rep.covariate_names, rep.Z);
      io::write_matrix((dir / "coords.csv").string(), {"x", "y"}, rep.coords);
      io::write_graph((dir / "edges.csv").string(), rep.graph);
      io::write_json((dir / "schema.json").string(), io::schema_to_json(rep.schema, rep.covariate_names));
      if (rep.planted)
        io::write_json((dir / "planted.json").string(), {{"i", rep.planted->i}, {"j", rep.planted->j}});
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  }
  return 0;
}
