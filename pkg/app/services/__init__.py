# Atlas Lab Services
