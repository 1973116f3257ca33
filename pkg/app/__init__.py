# Atlas Lab - conditional template learning
