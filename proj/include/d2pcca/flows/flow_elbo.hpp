#pragma once

#include "d2pcca/model/model.hpp"

namespace d2pcca::flows {

// Flow-augmented bound: u_t from the combiner, z_t = f(u_t), and the log-determinant
// enters the entropy term. Uses the model's attached flow stack.
model::ElboTerms flow_elbo(Tape& tape, const model::D2pccaModel& model, const model::SequenceBatch& x,
                           model::NoiseSource& noise, const model::ElboOptions& options = {});

model::ElboTerms flow_elbo(Tape& tape, const model::D2pccaModel& model, const FlowStack& stack,
                           const model::SequenceBatch& x, model::NoiseSource& noise,
                           const model::ElboOptions& options = {});

}  // namespace d2pcca::flows
